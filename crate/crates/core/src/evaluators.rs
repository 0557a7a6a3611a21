//! In-process objective functions standing in for training a network.
//!
//! [`Ackley`] is a classic synthetic black-box benchmark for validating the
//! search machinery. [`StructuredSurrogate`] maps architecture features to a
//! pseudo top-1 accuracy with the qualitative trends of ConvNet scaling:
//! deeper, wider, higher resolution, larger expansion and SE all help, and
//! very deep networks are penalized.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{NetworkArchitecture, NetworkEncoding, SearchSpaceError, SearchSpaceSpec};

pub const SURROGATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EvaluatorError {
    #[error(transparent)]
    Encoding(#[from] SearchSpaceError),
    #[error("surrogate config: {0}")]
    Config(String),
    #[error("evaluation failed: {0}")]
    Failed(String),
}

/// Black-box objective; higher is better, values lie in `[0, 1]`.
pub trait Evaluator: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, encoding: &NetworkEncoding) -> Result<f64, EvaluatorError>;
    /// True when identical encodings always give identical values.
    fn is_deterministic(&self) -> bool;
}

/// Per-digit choice position scaled into `[0, 1]`; single-choice digits map to 0.5.
fn unit_positions(space: &SearchSpaceSpec, encoding: &NetworkEncoding) -> Result<Vec<f64>, EvaluatorError> {
    let counts = space.choice_counts();
    let indices = space.to_indices(encoding)?;
    Ok(indices
        .iter()
        .zip(counts)
        .map(|(&i, k)| if k > 1 { i as f64 / (k - 1) as f64 } else { 0.5 })
        .collect())
}

/// Ackley function value at `x`.
pub fn ackley(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let sum_sq: f64 = x.iter().map(|v| v * v).sum();
    let sum_cos: f64 = x.iter().map(|v| (2.0 * std::f64::consts::PI * v).cos()).sum();
    -20.0 * (-0.2 * (sum_sq / d).sqrt()).exp() - (sum_cos / d).exp() + 20.0 + std::f64::consts::E
}

/// Upper bound of [`ackley`] used for normalization.
pub const ACKLEY_MAX: f64 = 20.0 + std::f64::consts::E;

/// `1 - ackley(x) / ACKLEY_MAX` where each digit is mapped linearly onto
/// `[-5, 5]` by its choice position; the mid-range encoding scores highest.
pub struct Ackley {
    space: SearchSpaceSpec,
}

impl Ackley {
    pub fn new(space: SearchSpaceSpec) -> Self {
        Self { space }
    }

    pub fn point(&self, encoding: &NetworkEncoding) -> Result<Vec<f64>, EvaluatorError> {
        Ok(unit_positions(&self.space, encoding)?
            .into_iter()
            .map(|u| -5.0 + 10.0 * u)
            .collect())
    }
}

impl Evaluator for Ackley {
    fn name(&self) -> &str {
        "ackley"
    }

    fn evaluate(&self, encoding: &NetworkEncoding) -> Result<f64, EvaluatorError> {
        let x = self.point(encoding)?;
        Ok((1.0 - ackley(&x) / ACKLEY_MAX).clamp(0.0, 1.0))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Coefficients of the structured surrogate; loadable from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateCoefficients {
    pub schema_version: u32,
    pub base: f64,
    /// Weight of `ln(1 + depth)`.
    pub w_depth: f64,
    /// Weight of `ln(1 + mean filters)`.
    pub w_width: f64,
    /// Weight of `ln(resolution / 224)`.
    pub w_resolution: f64,
    /// Weight of `(mean expansion - 2) / 4 * 0.04`.
    pub w_expansion: f64,
    /// Weight of `SE fraction * 0.005`.
    pub w_se: f64,
    /// Depth above which the overfit penalty applies.
    pub overfit_knee: f64,
    /// Penalty `overfit_quadratic * (depth - knee)^2` above the knee.
    pub overfit_quadratic: f64,
    /// Standard deviation of the optional Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for SurrogateCoefficients {
    fn default() -> Self {
        Self {
            schema_version: SURROGATE_SCHEMA_VERSION,
            base: 0.70,
            w_depth: 0.015,
            w_width: 0.012,
            w_resolution: 0.06,
            w_expansion: 1.0,
            w_se: 1.0,
            overfit_knee: 60.0,
            overfit_quadratic: 2e-4,
            noise_sigma: 0.002,
        }
    }
}

impl SurrogateCoefficients {
    pub fn load(path: &Path) -> Result<Self, EvaluatorError> {
        let text = fs::read_to_string(path).map_err(|e| EvaluatorError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, EvaluatorError> {
        let c: Self = serde_json::from_str(text).map_err(|e| EvaluatorError::Config(e.to_string()))?;
        if c.schema_version != SURROGATE_SCHEMA_VERSION {
            return Err(EvaluatorError::Config(format!("unsupported schema version {}", c.schema_version)));
        }
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("coefficients serialize")
    }
}

/// Architecture summary the surrogate scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArchFeatures {
    /// Body layers, head excluded.
    pub depth: f64,
    pub mean_filters: f64,
    pub resolution: f64,
    /// Mean over IRB / Fused-IRB layers (2 when there are none).
    pub mean_expansion: f64,
    /// Share of IRB / Fused-IRB layers with SE.
    pub se_fraction: f64,
}

impl ArchFeatures {
    pub fn of(arch: &NetworkArchitecture) -> Self {
        let depth = arch.layers.len() as f64;
        let mean_filters = if arch.layers.is_empty() {
            0.0
        } else {
            arch.layers.iter().map(|l| l.out_filters as f64).sum::<f64>() / depth
        };
        let blocks: Vec<_> = arch.layers.iter().filter(|l| l.layer_type.is_block()).collect();
        let (mean_expansion, se_fraction) = if blocks.is_empty() {
            (2.0, 0.0)
        } else {
            let n = blocks.len() as f64;
            (
                blocks.iter().map(|l| l.expansion.unwrap_or(2) as f64).sum::<f64>() / n,
                blocks.iter().filter(|l| l.se == Some(true)).count() as f64 / n,
            )
        };
        Self {
            depth,
            mean_filters,
            resolution: arch.resolution as f64,
            mean_expansion,
            se_fraction,
        }
    }
}

pub struct StructuredSurrogate {
    space: SearchSpaceSpec,
    coefficients: SurrogateCoefficients,
    noise_seed: Option<u64>,
}

impl StructuredSurrogate {
    pub fn new(space: SearchSpaceSpec) -> Self {
        Self::with_coefficients(space, SurrogateCoefficients::default())
    }

    pub fn with_coefficients(space: SearchSpaceSpec, coefficients: SurrogateCoefficients) -> Self {
        Self {
            space,
            coefficients,
            noise_seed: None,
        }
    }

    /// Adds seeded Gaussian noise; the noise of one encoding is fixed per seed.
    pub fn with_noise(mut self, seed: u64) -> Self {
        self.noise_seed = Some(seed);
        self
    }

    pub fn coefficients(&self) -> &SurrogateCoefficients {
        &self.coefficients
    }

    /// The noiseless score of a feature vector, before clamping.
    pub fn score(&self, f: &ArchFeatures) -> f64 {
        let c = &self.coefficients;
        let overfit = (f.depth - c.overfit_knee).max(0.0);
        c.base + c.w_depth * (1.0 + f.depth).ln() + c.w_width * (1.0 + f.mean_filters).ln()
            + c.w_resolution * (f.resolution / 224.0).ln()
            + c.w_expansion * (f.mean_expansion - 2.0) / 4.0 * 0.04
            + c.w_se * f.se_fraction * 0.005
            - c.overfit_quadratic * overfit * overfit
    }

    fn noise(&self, encoding: &NetworkEncoding, seed: u64) -> f64 {
        let h = encoding
            .digits()
            .iter()
            .fold(splitmix64(seed), |acc, &d| splitmix64(acc ^ d as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        Normal::new(0.0, self.coefficients.noise_sigma)
            .map(|n| n.sample(&mut rng))
            .unwrap_or(0.0)
    }
}

impl Evaluator for StructuredSurrogate {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn evaluate(&self, encoding: &NetworkEncoding) -> Result<f64, EvaluatorError> {
        let arch = self.space.decode(encoding)?;
        let mut acc = self.score(&ArchFeatures::of(&arch));
        if let Some(seed) = self.noise_seed {
            acc += self.noise(encoding, seed);
        }
        Ok(acc.clamp(0.0, 1.0))
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// SplitMix64 finalizer, used to derive stable sub-seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Evaluator by CLI name.
pub fn by_name(name: &str, space: SearchSpaceSpec, noise_seed: Option<u64>) -> Option<Box<dyn Evaluator>> {
    match name {
        "ackley" => Some(Box::new(Ackley::new(space))),
        "surrogate" => {
            let s = StructuredSurrogate::new(space);
            Some(Box::new(match noise_seed {
                Some(seed) => s.with_noise(seed),
                None => s,
            }))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{digit_index, DigitRole, ENCODING_LEN};
    use proptest::prelude::*;

    fn set(enc: &NetworkEncoding, role: DigitRole, value: u32) -> NetworkEncoding {
        let mut d = enc.clone().into_digits();
        for stage in 0..8u8 {
            if let Some(i) = digit_index(stage, role) {
                d[i] = value;
            }
        }
        NetworkEncoding::new(d)
    }

    fn reference_ackley(x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mut a = 0.0;
        let mut b = 0.0;
        for v in x {
            a += v * v;
            b += (2.0 * std::f64::consts::PI * v).cos();
        }
        20.0 + std::f64::consts::E - 20.0 * (-0.2 * (a / n).sqrt()).exp() - (b / n).exp()
    }

    #[test]
    fn ackley_optimum_is_one() {
        let mut space = SearchSpaceSpec::table1();
        // Odd choice counts put a grid point at x = 0 in every digit.
        space.resolution_values = vec![224, 256, 288];
        for st in &mut space.stages[..8] {
            st.kernel_choices.truncate(1);
            st.activation_choices.truncate(1);
            st.se_choices.truncate(1);
            st.layer_range.1 = st.layer_range.0;
            st.expansion_range = st.expansion_range.map(|_| (2, 4));
            st.filters.hi = st.filters.lo;
        }
        let mid = space.from_indices(&[1; ENCODING_LEN]);
        let a = Ackley::new(space.clone());
        assert!(a.point(&mid).unwrap().iter().all(|&x| x == 0.0));
        assert!((a.evaluate(&mid).unwrap() - 1.0).abs() < 1e-12);
        assert!(a.evaluate(&space.minimum_encoding()).unwrap() < 1.0);
    }

    #[test]
    fn ackley_matches_reference_formula() {
        let space = SearchSpaceSpec::table1();
        let a = Ackley::new(space.clone());
        for e in crate::sampler::sample_encodings(&space, 20, 77).unwrap() {
            let x = a.point(&e).unwrap();
            let expected = 1.0 - reference_ackley(&x) / (20.0 + std::f64::consts::E);
            assert!((a.evaluate(&e).unwrap() - expected).abs() < 1e-9);
        }
        assert!(a.evaluate(&space.minimum_encoding()).unwrap() < 1.0);
    }

    #[test]
    fn expansion_six_vs_two_gap() {
        let space = SearchSpaceSpec::table1();
        let s = StructuredSurrogate::new(space.clone());
        for e in crate::sampler::sample_encodings(&space, 50, 1).unwrap() {
            let hi = s.evaluate(&set(&e, DigitRole::Expansion, 6)).unwrap();
            let lo = s.evaluate(&set(&e, DigitRole::Expansion, 2)).unwrap();
            assert!(((hi - lo) - 0.040).abs() <= 0.005, "gap {}", hi - lo);
        }
    }

    #[test]
    fn resolution_and_se_help() {
        let space = SearchSpaceSpec::table1();
        let s = StructuredSurrogate::new(space.clone());
        for e in crate::sampler::sample_encodings(&space, 50, 3).unwrap() {
            let mut lo = e.clone().into_digits();
            lo[0] = 224;
            let mut hi = lo.clone();
            hi[0] = 384;
            assert!(s.evaluate(&NetworkEncoding::new(hi)).unwrap() > s.evaluate(&NetworkEncoding::new(lo)).unwrap());
            let with = s.evaluate(&set(&e, DigitRole::Se, 1)).unwrap();
            let without = s.evaluate(&set(&e, DigitRole::Se, 0)).unwrap();
            assert!(with > without);
        }
    }

    #[test]
    fn noise_is_seeded() {
        let space = SearchSpaceSpec::table1();
        let e = space.maximum_encoding();
        let clean = StructuredSurrogate::new(space.clone()).evaluate(&e).unwrap();
        let a = StructuredSurrogate::new(space.clone()).with_noise(5).evaluate(&e).unwrap();
        let b = StructuredSurrogate::new(space.clone()).with_noise(5).evaluate(&e).unwrap();
        let c = StructuredSurrogate::new(space).with_noise(6).evaluate(&e).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((a - clean).abs() < 0.02);
    }

    #[test]
    fn coefficient_config_round_trip() {
        let c = SurrogateCoefficients::default();
        assert_eq!(SurrogateCoefficients::from_json(&c.to_json()).unwrap(), c);
        let bad = c.to_json().replace("\"schema_version\": 1", "\"schema_version\": 2");
        assert!(SurrogateCoefficients::from_json(&bad).is_err());
    }

    fn features() -> impl Strategy<Value = ArchFeatures> {
        (6.0f64..76.0, 24.0f64..832.0, 224.0f64..512.0, 2.0f64..6.0, 0.0f64..1.0).prop_map(|(d, f, r, e, s)| ArchFeatures {
            depth: d,
            mean_filters: f,
            resolution: r,
            mean_expansion: e,
            se_fraction: s,
        })
    }

    proptest! {
        #[test]
        fn monotone_below_knee(f in features(), delta in 0.01f64..4.0) {
            let s = StructuredSurrogate::new(SearchSpaceSpec::table1());
            let base = s.score(&f);
            let knee = s.coefficients().overfit_knee;
            if f.depth + delta <= knee {
                let bumped = ArchFeatures { depth: f.depth + delta, ..f };
                prop_assert!(s.score(&bumped) > base, "depth");
            }
            let bumped = ArchFeatures { mean_filters: f.mean_filters + delta, ..f };
            prop_assert!(s.score(&bumped) > base, "mean_filters");
            let bumped = ArchFeatures { resolution: f.resolution + delta, ..f };
            prop_assert!(s.score(&bumped) > base, "resolution");
            let bumped = ArchFeatures { mean_expansion: f.mean_expansion + delta, ..f };
            prop_assert!(s.score(&bumped) > base, "mean_expansion");
            let bumped = ArchFeatures { se_fraction: f.se_fraction + delta, ..f };
            prop_assert!(s.score(&bumped) > base, "se_fraction");
        }
    }

    #[test]
    fn deep_networks_are_penalized() {
        let s = StructuredSurrogate::new(SearchSpaceSpec::table1());
        let f = ArchFeatures { depth: 60.0, mean_filters: 200.0, resolution: 320.0, mean_expansion: 4.0, se_fraction: 0.5 };
        assert!(s.score(&ArchFeatures { depth: 76.0, ..f }) < s.score(&f));
    }
}
