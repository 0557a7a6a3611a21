//! Per-layer latency lookup and additive network latency estimation.
//!
//! A network's latency is the sum of its layers' latencies, each looked up in a
//! [`LatencyTable`] under a [`LayerKey`] built from the layer's input shape and
//! configuration. One IRB / Fused-IRB block is one key.

mod backend;
mod table;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{Activation, LayerType, NetworkArchitecture, NetworkEncoding, SearchSpaceError, SearchSpaceSpec, INPUT_CHANNELS};

pub use backend::{AnalyticCostModel, ExternalCommandBackend, LatencyBackend, RecordedTableBackend};
pub use table::{LatencyTable, TableMetadata, TABLE_SCHEMA_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatencyError {
    #[error("no latency table entry for {0}")]
    MissingEntry(String),
    #[error("benchmark of {key} failed: {cause}")]
    BackendFailure { key: String, cause: String },
    #[error("latency {value} for {key} is not a finite non-negative number")]
    InvalidLatency { key: String, value: f64 },
    #[error(transparent)]
    Encoding(#[from] SearchSpaceError),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: usize, key: String },
    #[error("malformed layer key {0:?}")]
    MalformedKey(String),
}

/// Canonical identity of one layer for latency lookup.
///
/// The canonical text form is
/// `type/h<H>/w<W>/c<C>/k<K>/s<S>/o<OUT>/e<E>/se<0|1>/<act>` where absent
/// optional fields are written as `e-`, `se-` and `none`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerKey {
    pub layer_type: LayerType,
    pub input_h: u32,
    pub input_w: u32,
    pub input_c: u32,
    pub kernel: u32,
    pub stride: u32,
    pub out_filters: u32,
    pub expansion: Option<u32>,
    pub se: Option<bool>,
    pub activation: Option<Activation>,
}

impl LayerKey {
    pub fn output_hw(&self) -> (u32, u32) {
        (self.input_h.div_ceil(self.stride), self.input_w.div_ceil(self.stride))
    }
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/h{}/w{}/c{}/k{}/s{}/o{}/",
            self.layer_type.token(),
            self.input_h,
            self.input_w,
            self.input_c,
            self.kernel,
            self.stride,
            self.out_filters
        )?;
        match self.expansion {
            Some(e) => write!(f, "e{e}/")?,
            None => f.write_str("e-/")?,
        }
        match self.se {
            Some(se) => write!(f, "se{}/", se as u8)?,
            None => f.write_str("se-/")?,
        }
        f.write_str(self.activation.map_or("none", Activation::token))
    }
}

impl FromStr for LayerKey {
    type Err = LatencyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || LatencyError::MalformedKey(s.to_string());
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 10 {
            return Err(bad());
        }
        let num = |part: &str, prefix: &str| -> Result<u32, LatencyError> {
            part.strip_prefix(prefix).and_then(|v| v.parse().ok()).ok_or_else(bad)
        };
        let expansion = match parts[7] {
            "e-" => None,
            p => Some(num(p, "e")?),
        };
        let se = match parts[8] {
            "se-" => None,
            "se0" => Some(false),
            "se1" => Some(true),
            _ => return Err(bad()),
        };
        let activation = match parts[9] {
            "none" => None,
            t => Some(Activation::from_token(t).ok_or_else(bad)?),
        };
        let key = LayerKey {
            layer_type: LayerType::from_token(parts[0]).ok_or_else(bad)?,
            input_h: num(parts[1], "h")?,
            input_w: num(parts[2], "w")?,
            input_c: num(parts[3], "c")?,
            kernel: num(parts[4], "k")?,
            stride: num(parts[5], "s")?,
            out_filters: num(parts[6], "o")?,
            expansion,
            se,
            activation,
        };
        if key.stride == 0 || key.to_string() != s {
            return Err(bad());
        }
        Ok(key)
    }
}

/// Keys of every layer of `arch` in execution order, head last.
///
/// The resolution seeds the first input shape; each stride-2 layer halves
/// height and width with ceiling division.
pub fn layer_keys_of(arch: &NetworkArchitecture) -> Vec<LayerKey> {
    let mut keys = Vec::with_capacity(arch.layers.len() + 1);
    let (mut h, mut w, mut c) = (arch.resolution, arch.resolution, INPUT_CHANNELS);
    for layer in &arch.layers {
        let key = LayerKey {
            layer_type: layer.layer_type,
            input_h: h,
            input_w: w,
            input_c: c,
            kernel: layer.kernel,
            stride: layer.stride,
            out_filters: layer.out_filters,
            expansion: layer.expansion,
            se: layer.se,
            activation: Some(layer.activation),
        };
        (h, w) = key.output_hw();
        c = layer.out_filters;
        keys.push(key);
    }
    keys.push(LayerKey {
        layer_type: LayerType::Head,
        input_h: h,
        input_w: w,
        input_c: c,
        kernel: 1,
        stride: 1,
        out_filters: arch.head.filters,
        expansion: None,
        se: None,
        activation: None,
    });
    keys
}

/// Sum of the table entries of every layer of `arch`, in microseconds.
///
/// Summation runs left to right over [`layer_keys_of`], so the result is
/// reproducible bit for bit.
pub fn estimate_network_latency(arch: &NetworkArchitecture, table: &LatencyTable) -> Result<f64, LatencyError> {
    layer_keys_of(arch).iter().try_fold(0.0, |acc, key| {
        table
            .get(key)
            .map(|us| acc + us)
            .ok_or_else(|| LatencyError::MissingEntry(key.to_string()))
    })
}

/// Whole-network latency of an encoding, in microseconds.
pub trait NetworkLatency {
    fn latency_us(&self, encoding: &NetworkEncoding) -> Result<f64, LatencyError>;
}

impl<F> NetworkLatency for F
where
    F: Fn(&NetworkEncoding) -> Result<f64, LatencyError>,
{
    fn latency_us(&self, encoding: &NetworkEncoding) -> Result<f64, LatencyError> {
        self(encoding)
    }
}

/// Table-backed estimator for encodings of one search space.
///
/// With a backend attached, missing layers are benchmarked on first use and
/// recorded in the table; without one, a missing layer is an error.
pub struct LatencyEstimator {
    space: SearchSpaceSpec,
    table: RwLock<LatencyTable>,
    backend: Option<Box<dyn LatencyBackend>>,
}

impl LatencyEstimator {
    pub fn new(space: SearchSpaceSpec, table: LatencyTable) -> Self {
        Self {
            space,
            table: RwLock::new(table),
            backend: None,
        }
    }

    pub fn with_backend(space: SearchSpaceSpec, table: LatencyTable, backend: Box<dyn LatencyBackend>) -> Self {
        Self {
            space,
            table: RwLock::new(table),
            backend: Some(backend),
        }
    }

    /// Estimator over an empty table that fills itself from the analytic model.
    pub fn analytic(space: SearchSpaceSpec) -> Self {
        let backend = AnalyticCostModel::default();
        let table = LatencyTable::new(TableMetadata::for_backend(&backend));
        Self::with_backend(space, table, Box::new(backend))
    }

    pub fn space(&self) -> &SearchSpaceSpec {
        &self.space
    }

    pub fn table(&self) -> LatencyTable {
        self.table.read().expect("table lock").clone()
    }

    pub fn estimate_architecture(&self, arch: &NetworkArchitecture) -> Result<f64, LatencyError> {
        let keys = layer_keys_of(arch);
        let mut total = 0.0;
        let mut missing = Vec::new();
        {
            let table = self.table.read().expect("table lock");
            for (i, key) in keys.iter().enumerate() {
                match table.get(key) {
                    Some(us) => total += us,
                    None if self.backend.is_some() => {
                        missing.push(i);
                        break;
                    }
                    None => return Err(LatencyError::MissingEntry(key.to_string())),
                }
            }
        }
        if missing.is_empty() {
            return Ok(total);
        }
        let backend = self.backend.as_ref().expect("checked above");
        let mut table = self.table.write().expect("table lock");
        let mut total = 0.0;
        for key in &keys {
            let us = match table.get(key) {
                Some(us) => us,
                None => {
                    let us = backend.benchmark(key)?;
                    table.insert(*key, us)?;
                    us
                }
            };
            total += us;
        }
        Ok(total)
    }
}

impl NetworkLatency for LatencyEstimator {
    fn latency_us(&self, encoding: &NetworkEncoding) -> Result<f64, LatencyError> {
        let arch = self.space.decode(encoding)?;
        self.estimate_architecture(&arch)
    }
}

/// Table curation that failed for some keys. The successful part is kept.
#[derive(Debug, Error)]
#[error("{} layer benchmarks failed", failures.len())]
pub struct BuildError {
    pub partial: LatencyTable,
    pub failures: Vec<(LayerKey, String)>,
}

impl BuildError {
    /// `key<TAB>cause` lines for the failure manifest.
    pub fn failure_manifest(&self) -> String {
        self.failures
            .iter()
            .map(|(k, cause)| format!("{k}\t{}\n", cause.replace(['\n', '\t'], " ")))
            .collect()
    }
}

/// Benchmarks every distinct key not already in `existing` exactly once,
/// spreading the work over `workers` threads.
///
/// Present entries are never re-benchmarked or modified.
pub fn build_table<I>(
    keys: I,
    backend: &dyn LatencyBackend,
    workers: usize,
    existing: LatencyTable,
) -> Result<LatencyTable, BuildError>
where
    I: IntoIterator<Item = LayerKey>,
{
    let pending: Vec<LayerKey> = keys
        .into_iter()
        .filter(|k| existing.get(k).is_none())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<HashMap<usize, Result<f64, String>>> = Mutex::new(HashMap::with_capacity(pending.len()));
    let workers = workers.max(1).min(pending.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(key) = pending.get(i) else { break };
                let outcome = backend.benchmark(key).map_err(|e| e.to_string());
                results.lock().expect("results lock").insert(i, outcome);
            });
        }
    });

    let mut results = results.into_inner().expect("results lock");
    let mut table = existing;
    let mut failures = Vec::new();
    for (i, key) in pending.into_iter().enumerate() {
        match results.remove(&i).expect("every key benchmarked") {
            Ok(us) => {
                if let Err(e) = table.insert(key, us) {
                    failures.push((key, e.to_string()));
                }
            }
            Err(cause) => failures.push((key, cause)),
        }
    }
    if failures.is_empty() {
        Ok(table)
    } else {
        Err(BuildError { partial: table, failures })
    }
}
