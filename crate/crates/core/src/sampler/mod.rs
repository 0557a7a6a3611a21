//! Low-discrepancy sampling of the search space and stratification of the
//! samples into latency buckets.

mod sobol;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::latency::{LatencyError, NetworkLatency};
use crate::search_space::{NetworkEncoding, SearchSpaceSpec, ENCODING_LEN};

pub use sobol::{sobol_points, SobolStream, MAX_DIMENSION};

/// Default first Sobol index; index 0 is the all-zero point.
pub const DEFAULT_SKIP: u64 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("unsupported Sobol dimension {0} (supported: 1..={max})", max = MAX_DIMENSION)]
    UnsupportedDimension(usize),
    #[error("Sobol index {0} exceeds the 32-bit sequence length")]
    IndexOverflow(u64),
    #[error("bucket bounds must be finite, non-negative and strictly increasing")]
    InvalidBounds,
    #[error("latency estimation failed for [{encoding}]: {source}")]
    Estimator {
        encoding: NetworkEncoding,
        #[source]
        source: LatencyError,
    },
    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Maps a unit-cube point to an encoding: coordinate `c` of a digit with `k`
/// choices selects choice `floor(c * k)`.
pub fn quantize(point: &[f64], space: &SearchSpaceSpec) -> NetworkEncoding {
    quantize_with(point, &space.domains())
}

/// [`quantize`] against precomputed digit domains.
pub fn quantize_with(point: &[f64], domains: &[Vec<u32>]) -> NetworkEncoding {
    NetworkEncoding::new(
        domains
            .iter()
            .zip(point)
            .map(|(values, &c)| {
                let k = values.len();
                let i = ((c * k as f64).floor().max(0.0) as usize).min(k - 1);
                values[i]
            })
            .collect(),
    )
}

/// `n` Sobol-quantized encodings of `space` starting at index `skip`.
pub fn sample_encodings(
    space: &SearchSpaceSpec,
    n: usize,
    skip: u64,
) -> Result<Vec<NetworkEncoding>, SamplerError> {
    let domains = space.domains();
    let mut stream = SobolStream::new(ENCODING_LEN, skip)?;
    let mut point = vec![0.0; ENCODING_LEN];
    (0..n)
        .map(|_| {
            stream.next_into(&mut point)?;
            Ok(quantize_with(&point, &domains))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketMember {
    pub encoding: NetworkEncoding,
    pub latency_us: f64,
}

/// Networks whose estimated latency lies in `[lower_ms, upper_ms)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyBucket {
    pub lower_ms: f64,
    /// `f64::INFINITY` for the overflow bucket.
    pub upper_ms: f64,
    pub members: Vec<BucketMember>,
}

impl LatencyBucket {
    pub fn new(lower_ms: f64, upper_ms: f64) -> Self {
        Self {
            lower_ms,
            upper_ms,
            members: Vec::new(),
        }
    }

    pub fn contains_ms(&self, latency_ms: f64) -> bool {
        latency_ms >= self.lower_ms && latency_ms < self.upper_ms
    }

    pub fn contains_us(&self, latency_us: f64) -> bool {
        self.contains_ms(latency_us / 1000.0)
    }

    pub fn is_overflow(&self) -> bool {
        self.upper_ms.is_infinite()
    }

    /// `lo:hi` label, e.g. `0:0.5`.
    pub fn label(&self) -> String {
        format!("{}:{}", self.lower_ms, self.upper_ms)
    }
}

fn check_bounds(bounds_ms: &[f64]) -> Result<(), SamplerError> {
    let ok = bounds_ms.iter().all(|b| b.is_finite() && *b > 0.0)
        && bounds_ms.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(SamplerError::InvalidBounds)
    }
}

/// Empty buckets `[0, b0), [b0, b1), ..., [b_last, inf)`.
pub fn bucket_skeleton(bounds_ms: &[f64]) -> Result<Vec<LatencyBucket>, SamplerError> {
    check_bounds(bounds_ms)?;
    let mut edges = vec![0.0];
    edges.extend_from_slice(bounds_ms);
    edges.push(f64::INFINITY);
    Ok(edges.windows(2).map(|w| LatencyBucket::new(w[0], w[1])).collect())
}

/// Index of the bucket for `latency_ms` among the skeleton built from `bounds_ms`.
fn bucket_index(bounds_ms: &[f64], latency_ms: f64) -> usize {
    bounds_ms.partition_point(|&b| b <= latency_ms)
}

/// Places each sample into the bucket of its estimated latency.
///
/// Returns one bucket per bound plus an overflow bucket for latencies at or
/// above the last bound.
pub fn stratify<L: NetworkLatency + ?Sized>(
    samples: &[NetworkEncoding],
    estimator: &L,
    bounds_ms: &[f64],
) -> Result<Vec<LatencyBucket>, SamplerError> {
    let mut buckets = bucket_skeleton(bounds_ms)?;
    for encoding in samples {
        let latency_us = estimator
            .latency_us(encoding)
            .map_err(|source| SamplerError::Estimator {
                encoding: encoding.clone(),
                source,
            })?;
        let i = bucket_index(bounds_ms, latency_us / 1000.0);
        buckets[i].members.push(BucketMember {
            encoding: encoding.clone(),
            latency_us,
        });
    }
    Ok(buckets)
}

/// Concatenates two stratifications built over the same bounds.
pub fn merge_buckets(mut left: Vec<LatencyBucket>, right: Vec<LatencyBucket>) -> Vec<LatencyBucket> {
    for (l, r) in left.iter_mut().zip(right) {
        l.members.extend(r.members);
    }
    left
}

/// Writes encodings as one comma separated row of 41 integers per network.
pub fn write_encodings(path: &Path, encodings: &[NetworkEncoding]) -> Result<(), SamplerError> {
    let mut text = String::with_capacity(encodings.len() * 128);
    for e in encodings {
        let _ = writeln!(text, "{e}");
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_encodings(path: &Path) -> Result<Vec<NetworkEncoding>, SamplerError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.parse::<NetworkEncoding>().map_err(|e| SamplerError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// File name of bucket `i` inside a stratification directory.
pub fn bucket_file_name(i: usize) -> String {
    format!("bucket_{i:02}.csv")
}

/// Writes one CSV per bucket plus a `manifest.csv` with bounds and counts.
pub fn write_stratification(dir: &Path, buckets: &[LatencyBucket]) -> Result<PathBuf, SamplerError> {
    fs::create_dir_all(dir)?;
    let mut manifest = format!("# schema_version: {MANIFEST_SCHEMA_VERSION}\nbucket,file,lower_ms,upper_ms,count\n");
    for (i, bucket) in buckets.iter().enumerate() {
        let encodings: Vec<_> = bucket.members.iter().map(|m| m.encoding.clone()).collect();
        let name = bucket_file_name(i);
        write_encodings(&dir.join(&name), &encodings)?;
        let _ = writeln!(
            manifest,
            "{i},{name},{},{},{}",
            bucket.lower_ms,
            if bucket.is_overflow() { "inf".to_string() } else { bucket.upper_ms.to_string() },
            bucket.members.len()
        );
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub bucket: usize,
    pub file: String,
    pub lower_ms: f64,
    pub upper_ms: f64,
    pub count: usize,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, SamplerError> {
    let text = fs::read_to_string(path)?;
    let bad = |line: usize, reason: &str| SamplerError::Format {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("bucket,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 columns"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
        rows.push(ManifestRow {
            bucket: f[0].parse().map_err(|_| bad(i + 1, "bad bucket index"))?,
            file: f[1].to_string(),
            lower_ms: num(f[2])?,
            upper_ms: num(f[3])?,
            count: f[4].parse().map_err(|_| bad(i + 1, "bad count"))?,
        });
    }
    Ok(rows)
}
