//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use latnas::evaluators::{Evaluator, StructuredSurrogate};
use latnas::latency::{LatencyEstimator, NetworkLatency};
use latnas::search_space::{NetworkEncoding, SearchSpaceSpec};

/// A 1,536-network slice of the full space with nine free digits, small
/// enough to enumerate. Its surrogate landscape is not trivial: random search
/// does not reliably get within 1% of the best network in the bucket.
pub fn shrunken_space() -> SearchSpaceSpec {
    let text = include_str!("../data/shrunken_space.json");
    serde_json::from_str(text).expect("fixture parses")
}

/// Every encoding of `space`, in odometer order over the free digits.
pub fn enumerate(space: &SearchSpaceSpec) -> Vec<NetworkEncoding> {
    let counts = space.choice_counts();
    let free: Vec<usize> = (0..counts.len()).filter(|&d| counts[d] > 1).collect();
    let total: usize = free.iter().map(|&d| counts[d]).product();
    (0..total)
        .map(|k| {
            let mut idx = vec![0usize; counts.len()];
            let mut r = k;
            for &d in &free {
                idx[d] = r % counts[d];
                r /= counts[d];
            }
            space.from_indices(&idx)
        })
        .collect()
}

/// Exhaustive view of the shrunken space under the analytic backend and the
/// noiseless surrogate.
pub struct Enumerated {
    pub space: SearchSpaceSpec,
    /// (latency ms, objective) per network.
    pub points: Vec<(f64, f64)>,
    /// Bucket upper bound: the median latency, so half the space is feasible.
    pub upper_ms: f64,
    /// Best objective among networks strictly below `upper_ms`.
    pub optimum: f64,
}

pub fn enumerated_shrunken() -> Enumerated {
    let space = shrunken_space();
    let est = LatencyEstimator::analytic(space.clone());
    let eval = StructuredSurrogate::new(space.clone());
    let points: Vec<(f64, f64)> = enumerate(&space)
        .iter()
        .map(|e| (est.latency_us(e).unwrap() / 1000.0, eval.evaluate(e).unwrap()))
        .collect();
    let mut lat: Vec<f64> = points.iter().map(|p| p.0).collect();
    lat.sort_by(f64::total_cmp);
    let upper_ms = lat[lat.len() / 2];
    let optimum = points
        .iter()
        .filter(|p| p.0 < upper_ms)
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    Enumerated {
        space,
        points,
        upper_ms,
        optimum,
    }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
