//! Pareto frontier and the latency-tiered model-hub table.
//!
//! Input is one or more result logs, each from a single-bucket search. The
//! outputs are plain CSV with a schema comment line and a header row.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::coordinator::checkpoint::{read_manifest, read_results, MANIFEST, RESULTS_LOG};
use crate::coordinator::CoordinatorError;
use crate::optimizer::CandidateRecord;
use crate::search_space::NetworkEncoding;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MODEL_HUB_CSV: &str = "model_hub.csv";
pub const PARETO_CSV: &str = "pareto.csv";
pub const PLOT_CSV: &str = "plot.csv";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{0}")]
    Input(#[from] CoordinatorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("frontier self-check failed: {0}")]
    SelfCheck(String),
}

/// Indices of the points no other point dominates, ordered by latency
/// ascending (ties by objective descending, then input order).
///
/// Point `a` dominates `b` when `a` is no slower and no worse, and strictly
/// better in one of the two. Identical points do not dominate each other.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (points[a], points[b]);
        pa.0.total_cmp(&pb.0).then(pb.1.total_cmp(&pa.1)).then(a.cmp(&b))
    });
    let mut front = Vec::new();
    // Best objective among strictly faster points.
    let mut best_faster = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        let latency = points[order[i]].0;
        let group_best = points[order[i]].1;
        let mut j = i;
        while j < order.len() && points[order[j]].0 == latency {
            let y = points[order[j]].1;
            if y == group_best && y > best_faster {
                front.push(order[j]);
            }
            j += 1;
        }
        best_faster = best_faster.max(group_best);
        i = j;
    }
    front
}

pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1)
}

/// Results of one single-bucket search.
#[derive(Clone, Debug)]
pub struct ResultSet {
    pub source: String,
    pub lower_ms: f64,
    pub upper_ms: Option<f64>,
    pub records: Vec<CandidateRecord>,
}

impl ResultSet {
    /// Loads a checkpoint directory, or a results log whose directory holds
    /// the manifest.
    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let (dir, log) = if path.is_dir() {
            (path.to_path_buf(), path.join(RESULTS_LOG))
        } else {
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (dir, path.to_path_buf())
        };
        let records = read_results(&log)?;
        let manifest = read_manifest(&dir).map_err(|e| {
            ReportError::Input(CoordinatorError::Checkpoint(format!("{e}; expected {MANIFEST} beside the log")))
        })?;
        Ok(Self {
            source: path.display().to_string(),
            lower_ms: manifest.bucket_lower_ms,
            upper_ms: manifest.bucket_upper_ms,
            records,
        })
    }

    /// Bucket bounds as `lo:hi` in ms.
    pub fn label(&self) -> String {
        match self.upper_ms {
            Some(hi) => format!("{}:{hi}", self.lower_ms),
            None => format!("{}:inf", self.lower_ms),
        }
    }

    /// Short bucket tag used in model names, e.g. `0p5ms` or `ge2ms`.
    pub fn tag(&self) -> String {
        let ms = |v: f64| format!("{v}").replace('.', "p").replace('-', "m");
        match self.upper_ms {
            Some(hi) => format!("{}ms", ms(hi)),
            None => format!("ge{}ms", ms(self.lower_ms)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelHubRow {
    pub name: String,
    pub bucket: String,
    pub encoding: NetworkEncoding,
    pub estimated_latency_ms: f64,
    pub objective: f64,
    /// Dominated by some result in any of the input sets.
    pub dominated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontRow {
    pub latency_ms: f64,
    pub objective: f64,
    pub job_id: String,
    pub bucket: String,
    pub encoding: NetworkEncoding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub hub: Vec<ModelHubRow>,
    pub front: Vec<FrontRow>,
    /// Every result as (latency_ms, objective, on_front).
    pub points: Vec<(f64, f64, bool)>,
}

fn by_objective_desc(a: &CandidateRecord, b: &CandidateRecord) -> Ordering {
    let (ya, yb) = (a.objective().unwrap_or(f64::NEG_INFINITY), b.objective().unwrap_or(f64::NEG_INFINITY));
    yb.total_cmp(&ya)
        .then(a.estimated_latency_us.total_cmp(&b.estimated_latency_us))
        .then_with(|| a.job_id.cmp(&b.job_id))
}

/// Builds the hub table (the `top` best results of each set) and the global
/// frontier, then verifies that no frontier point dominates another.
pub fn build_report(sets: &[ResultSet], top: usize) -> Result<Report, ReportError> {
    let mut all: Vec<(&ResultSet, &CandidateRecord)> = Vec::new();
    for set in sets {
        for r in &set.records {
            let y = r.objective().ok_or_else(|| ReportError::NonFinite(set.source.clone()))?;
            if !y.is_finite() || !r.estimated_latency_us.is_finite() {
                return Err(ReportError::NonFinite(set.source.clone()));
            }
            all.push((set, r));
        }
    }
    let pts: Vec<(f64, f64)> = all
        .iter()
        .map(|(_, r)| (r.estimated_latency_us / 1000.0, r.objective().expect("checked")))
        .collect();
    let front_idx = pareto_front(&pts);
    let mut on_front = vec![false; pts.len()];
    for &i in &front_idx {
        on_front[i] = true;
    }
    for (k, &a) in front_idx.iter().enumerate() {
        for &b in &front_idx[k + 1..] {
            if dominates(pts[a], pts[b]) || dominates(pts[b], pts[a]) {
                return Err(ReportError::SelfCheck(format!("{:?} vs {:?}", pts[a], pts[b])));
            }
        }
    }

    let mut hub = Vec::new();
    for set in sets {
        let mut best: Vec<&CandidateRecord> = set.records.iter().collect();
        best.sort_by(|a, b| by_objective_desc(a, b));
        for (rank, r) in best.into_iter().take(top).enumerate() {
            let p = (r.estimated_latency_us / 1000.0, r.objective().expect("checked"));
            hub.push(ModelHubRow {
                name: format!("net-{}-rank{}", set.tag(), rank + 1),
                bucket: set.label(),
                encoding: r.encoding.clone(),
                estimated_latency_ms: p.0,
                objective: p.1,
                dominated: pts.iter().any(|&q| dominates(q, p)),
            });
        }
    }
    hub.sort_by(|a, b| {
        a.estimated_latency_ms
            .total_cmp(&b.estimated_latency_ms)
            .then(b.objective.total_cmp(&a.objective))
            .then_with(|| a.name.cmp(&b.name))
    });

    let front = front_idx
        .iter()
        .map(|&i| {
            let (set, r) = all[i];
            FrontRow {
                latency_ms: pts[i].0,
                objective: pts[i].1,
                job_id: r.job_id.clone().unwrap_or_default(),
                bucket: set.label(),
                encoding: r.encoding.clone(),
            }
        })
        .collect();
    let points = pts.iter().zip(&on_front).map(|(&(x, y), &f)| (x, y, f)).collect();
    Ok(Report { hub, front, points })
}

/// Digits separated by spaces so the encoding stays one CSV field.
fn encoding_field(e: &NetworkEncoding) -> String {
    e.digits().iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

fn header(columns: &str) -> String {
    format!("# schema_version: {REPORT_SCHEMA_VERSION}\n{columns}\n")
}

pub fn model_hub_csv(report: &Report) -> String {
    let mut s = header("name,bucket,latency_ms,objective,dominated,encoding");
    for r in &report.hub {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.name,
            r.bucket,
            r.estimated_latency_ms,
            r.objective,
            r.dominated,
            encoding_field(&r.encoding)
        );
    }
    s
}

pub fn pareto_csv(report: &Report) -> String {
    let mut s = header("latency_ms,objective,job_id,bucket,encoding");
    for r in &report.front {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.latency_ms,
            r.objective,
            r.job_id,
            r.bucket,
            encoding_field(&r.encoding)
        );
    }
    s
}

pub fn plot_csv(report: &Report) -> String {
    let mut s = header("latency_ms,objective,on_front");
    for (x, y, f) in &report.points {
        let _ = writeln!(s, "{x},{y},{}", u8::from(*f));
    }
    s
}

/// Writes the three CSV files into `dir` and returns their paths.
pub fn write_report(dir: &Path, report: &Report) -> Result<Vec<PathBuf>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let files = [
        (MODEL_HUB_CSV, model_hub_csv(report)),
        (PARETO_CSV, pareto_csv(report)),
        (PLOT_CSV, plot_csv(report)),
    ];
    let mut paths = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io(&path))?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn front_points(pts: &[(f64, f64)]) -> Vec<(f64, f64)> {
        pareto_front(pts).into_iter().map(|i| pts[i]).collect()
    }

    #[test]
    fn small_cases() {
        assert_eq!(front_points(&[(1.0, 0.8), (2.0, 0.7)]), vec![(1.0, 0.8)]);
        assert_eq!(front_points(&[(1.0, 0.8), (2.0, 0.9)]), vec![(1.0, 0.8), (2.0, 0.9)]);
        assert_eq!(front_points(&[(1.0, 0.8), (1.0, 0.8)]), vec![(1.0, 0.8), (1.0, 0.8)]);
        assert_eq!(front_points(&[(1.0, 0.8), (1.0, 0.9)]), vec![(1.0, 0.9)]);
        assert_eq!(front_points(&[(1.0, 0.8), (2.0, 0.8)]), vec![(1.0, 0.8)]);
        assert!(pareto_front(&[]).is_empty());
    }

    proptest! {
        // Coarse grid values force ties in both coordinates.
        #[test]
        fn sweep_matches_pairwise_check(pts in prop::collection::vec((0u8..6, 0u8..6), 0..40)) {
            let pts: Vec<(f64, f64)> = pts.into_iter().map(|(a, b)| (a as f64, b as f64)).collect();
            let got: std::collections::BTreeSet<usize> = pareto_front(&pts).into_iter().collect();
            for (i, &p) in pts.iter().enumerate() {
                let dominated = pts.iter().any(|&q| dominates(q, p));
                prop_assert_eq!(got.contains(&i), !dominated);
            }
        }
    }

    #[test]
    fn tags() {
        let set = |lo: f64, hi: Option<f64>| ResultSet { source: String::new(), lower_ms: lo, upper_ms: hi, records: vec![] };
        assert_eq!(set(0.0, Some(0.5)).tag(), "0p5ms");
        assert_eq!(set(1.0, Some(2.0)).tag(), "2ms");
        assert_eq!(set(2.0, None).tag(), "ge2ms");
    }
}
