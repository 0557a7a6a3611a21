use std::io::Write;
use std::process::{Command, Stdio};

use super::{LatencyError, LatencyTable, LayerKey};
use crate::search_space::{Activation, LayerType};

/// Something that can produce the latency of one layer in microseconds.
pub trait LatencyBackend: Send + Sync {
    fn id(&self) -> String;
    fn benchmark(&self, key: &LayerKey) -> Result<f64, LatencyError>;
}

/// Roofline-style analytic latency model of a batch-1 GPU inference engine.
///
/// `latency = kernels * launch_us + max(compute, memory) + activation + se`
/// where `compute = MACs / macs_per_us` and `memory = bytes / bytes_per_us`.
/// ReLU is fused into the producing convolution and costs nothing extra; Swish
/// runs as a separate elementwise kernel per activation site. SE adds a
/// pool / FC-FC / scale kernel triple plus its traffic.
///
/// The default constants put an EfficientNet-B0-like network at about 1.16 ms.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticCostModel {
    /// Effective multiply-accumulates per microsecond.
    pub macs_per_us: f64,
    /// Effective DRAM bytes per microsecond.
    pub bytes_per_us: f64,
    /// Fixed cost of one kernel launch.
    pub launch_us: f64,
    pub bytes_per_element: f64,
    /// Extra traffic per activated element (read + write) of an unfused activation.
    pub swish_bytes_per_element: f64,
    pub relu_bytes_per_element: f64,
    pub se_kernels: f64,
    /// SE reads the block output twice and writes it once.
    pub se_passes: f64,
    pub num_classes: u32,
}

impl Default for AnalyticCostModel {
    fn default() -> Self {
        Self {
            macs_per_us: 20e6,
            bytes_per_us: 0.8e6,
            launch_us: 8.0,
            bytes_per_element: 2.0,
            swish_bytes_per_element: 4.0,
            relu_bytes_per_element: 0.0,
            se_kernels: 3.0,
            se_passes: 3.0,
            num_classes: 1000,
        }
    }
}

/// Work of one layer, before conversion to time.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerWork {
    pub macs: f64,
    /// Activation and weight elements read or written.
    pub elements: f64,
    pub kernels: f64,
    /// Elements passing through an activation function.
    pub activated: f64,
    /// Kernels an unfused activation adds.
    pub activation_sites: f64,
    /// Elements the SE block scales (0 without SE).
    pub se_elements: f64,
    /// Channels the SE block squeezes.
    pub se_channels: f64,
}

impl AnalyticCostModel {
    pub fn work(&self, key: &LayerKey) -> LayerWork {
        let (ho, wo) = key.output_hw();
        let sp_in = key.input_h as f64 * key.input_w as f64;
        let sp_out = ho as f64 * wo as f64;
        let cin = key.input_c as f64;
        let cout = key.out_filters as f64;
        let k2 = key.kernel as f64 * key.kernel as f64;
        let mid = cin * key.expansion.unwrap_or(1) as f64;
        let mut w = match key.layer_type {
            LayerType::Conv => LayerWork {
                macs: sp_out * k2 * cin * cout,
                elements: sp_in * cin + sp_out * cout + k2 * cin * cout,
                kernels: 1.0,
                activated: sp_out * cout,
                activation_sites: 1.0,
                ..LayerWork::default()
            },
            LayerType::FusedIrb => LayerWork {
                macs: sp_out * k2 * cin * mid + sp_out * mid * cout,
                elements: sp_in * cin + 2.0 * sp_out * mid + sp_out * cout + k2 * cin * mid + mid * cout,
                kernels: 2.0,
                activated: sp_out * mid,
                activation_sites: 1.0,
                ..LayerWork::default()
            },
            LayerType::Irb => LayerWork {
                macs: sp_in * cin * mid + sp_out * k2 * mid + sp_out * mid * cout,
                elements: sp_in * cin
                    + 2.0 * sp_in * mid
                    + 2.0 * sp_out * mid
                    + sp_out * cout
                    + cin * mid
                    + k2 * mid
                    + mid * cout,
                kernels: 3.0,
                activated: sp_in * mid + sp_out * mid,
                activation_sites: 2.0,
                ..LayerWork::default()
            },
            LayerType::Head => {
                let classes = self.num_classes as f64;
                LayerWork {
                    macs: sp_out * k2 * cin * cout + cout * classes,
                    elements: sp_in * cin + sp_out * cout + k2 * cin * cout + cout * classes,
                    kernels: 3.0,
                    ..LayerWork::default()
                }
            }
        };
        if key.se == Some(true) {
            w.se_elements = sp_out * mid;
            w.se_channels = mid;
        }
        w
    }

    pub fn cost(&self, key: &LayerKey) -> f64 {
        let w = self.work(key);
        let compute = w.macs / self.macs_per_us;
        let memory = w.elements * self.bytes_per_element / self.bytes_per_us;
        let activation = match key.activation {
            Some(Activation::Swish) => {
                w.activation_sites * self.launch_us + w.activated * self.swish_bytes_per_element / self.bytes_per_us
            }
            Some(Activation::Relu) => w.activated * self.relu_bytes_per_element / self.bytes_per_us,
            None => 0.0,
        };
        let se = if w.se_elements > 0.0 {
            // squeeze to a quarter of the channels and back
            let fc_macs = 2.0 * w.se_channels * (w.se_channels / 4.0);
            self.se_kernels * self.launch_us
                + self.se_passes * w.se_elements * self.bytes_per_element / self.bytes_per_us
                + fc_macs / self.macs_per_us
        } else {
            0.0
        };
        w.kernels * self.launch_us + compute.max(memory) + activation + se
    }
}

impl LatencyBackend for AnalyticCostModel {
    fn id(&self) -> String {
        "analytic".into()
    }

    fn benchmark(&self, key: &LayerKey) -> Result<f64, LatencyError> {
        Ok(self.cost(key))
    }
}

/// Serves latencies from a previously recorded table (e.g. measured on a device).
pub struct RecordedTableBackend {
    table: LatencyTable,
}

impl RecordedTableBackend {
    pub fn new(table: LatencyTable) -> Self {
        Self { table }
    }
}

impl LatencyBackend for RecordedTableBackend {
    fn id(&self) -> String {
        format!("recorded:{}", self.table.metadata.backend)
    }

    fn benchmark(&self, key: &LayerKey) -> Result<f64, LatencyError> {
        self.table.get(key).ok_or_else(|| LatencyError::MissingEntry(key.to_string()))
    }
}

/// Runs a user command per layer: the canonical key is written to stdin, one
/// decimal microsecond value is read from stdout. A nonzero exit status is a
/// failure.
pub struct ExternalCommandBackend {
    program: String,
    args: Vec<String>,
}

impl ExternalCommandBackend {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }

    /// Splits a whitespace separated command line.
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Self::new(program, parts.collect()))
    }
}

impl LatencyBackend for ExternalCommandBackend {
    fn id(&self) -> String {
        format!("command:{}", self.program)
    }

    fn benchmark(&self, key: &LayerKey) -> Result<f64, LatencyError> {
        let key_text = key.to_string();
        let fail = |cause: String| LatencyError::BackendFailure {
            key: key_text.clone(),
            cause,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(format!("spawn {}: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            // A command that never reads its input may close the pipe early.
            let _ = stdin.write_all(format!("{key_text}\n").as_bytes());
        }
        let output = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(fail(format!("exit status {}: {}", output.status, stderr.trim())));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        let us: f64 = stdout
            .trim()
            .parse()
            .map_err(|_| fail(format!("unparsable output {:?}", stdout.trim())))?;
        if !us.is_finite() || us < 0.0 {
            return Err(fail(format!("invalid latency {us}")));
        }
        Ok(us)
    }
}
