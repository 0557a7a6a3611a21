//! Gaussian-process surrogate with a squared-exponential kernel and the
//! expected-improvement acquisition.
//!
//! Targets are standardized before fitting. The single shared length scale is
//! chosen from a fixed grid by log marginal likelihood, so fitting needs no
//! inner optimizer.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use libm::erfc;
use thiserror::Error;

/// Length scales tried when fitting.
pub const LENGTH_SCALE_GRID: [f64; 4] = [0.1, 0.2, 0.5, 1.0];
/// Diagonal jitter added, in order, when the kernel matrix is not positive definite.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("need at least 2 samples to fit, got {0}")]
    TooFewSamples(usize),
    #[error("kernel matrix singular even with jitter {0}")]
    SingularKernel(f64),
    #[error("sample inputs have inconsistent dimensions")]
    Dimension,
}

#[derive(Clone, Debug)]
pub struct SurrogateModel {
    xs: Vec<Vec<f64>>,
    y_mean: f64,
    y_scale: f64,
    length_scale: f64,
    noise: f64,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn kernel(a: &[f64], b: &[f64], length_scale: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * length_scale * length_scale)).exp()
}

struct Fit {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter: f64,
    log_ml: f64,
}

fn fit_one(xs: &[Vec<f64>], y: &DVector<f64>, length_scale: f64, noise: f64) -> Option<Fit> {
    let n = xs.len();
    let gram = DMatrix::from_fn(n, n, |i, j| kernel(&xs[i], &xs[j], length_scale));
    for jitter in JITTER_LADDER {
        let k = &gram + DMatrix::identity(n, n) * (noise + jitter);
        if let Some(chol) = Cholesky::new(k) {
            let alpha = chol.solve(y);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
            let log_ml = -0.5 * y.dot(&alpha) - log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
            if log_ml.is_finite() {
                return Some(Fit { chol, alpha, jitter, log_ml });
            }
        }
    }
    None
}

/// Fits a GP to `(xs, ys)` with noise variance `noise` (in standardized units).
pub fn fit_surrogate(xs: &[Vec<f64>], ys: &[f64], noise: f64) -> Result<SurrogateModel, SurrogateError> {
    fit_surrogate_with_grid(xs, ys, noise, &LENGTH_SCALE_GRID)
}

pub fn fit_surrogate_with_grid(
    xs: &[Vec<f64>],
    ys: &[f64],
    noise: f64,
    grid: &[f64],
) -> Result<SurrogateModel, SurrogateError> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(SurrogateError::TooFewSamples(n.min(ys.len())));
    }
    if xs.iter().any(|x| x.len() != xs[0].len()) {
        return Err(SurrogateError::Dimension);
    }
    let y_mean = ys.iter().sum::<f64>() / n as f64;
    let var = ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let y = DVector::from_iterator(n, ys.iter().map(|v| (v - y_mean) / y_scale));

    let mut best: Option<(f64, Fit)> = None;
    for &ls in grid {
        if let Some(fit) = fit_one(xs, &y, ls, noise) {
            if best.as_ref().is_none_or(|(_, b)| fit.log_ml > b.log_ml) {
                best = Some((ls, fit));
            }
        }
    }
    let (length_scale, fit) = best.ok_or(SurrogateError::SingularKernel(JITTER_LADDER[JITTER_LADDER.len() - 1]))?;
    Ok(SurrogateModel {
        xs: xs.to_vec(),
        y_mean,
        y_scale,
        length_scale,
        noise,
        jitter: fit.jitter,
        chol: fit.chol,
        alpha: fit.alpha,
    })
}

impl SurrogateModel {
    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.predict_batch(std::slice::from_ref(&x.to_vec()));
        (m[0], v[0])
    }

    pub fn predict_batch(&self, candidates: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = self.xs.len();
        let m = candidates.len();
        let k_star = DMatrix::from_fn(n, m, |i, j| kernel(&self.xs[i], &candidates[j], self.length_scale));
        let means = k_star.tr_mul(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&k_star)
            .expect("Cholesky factor has a positive diagonal");
        let scale2 = self.y_scale * self.y_scale;
        let mean = means.iter().map(|mu| mu * self.y_scale + self.y_mean).collect();
        let var = (0..m)
            .map(|j| {
                let explained: f64 = v.column(j).iter().map(|e| e * e).sum();
                (1.0 - explained).max(0.0) * scale2
            })
            .collect();
        (mean, var)
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form expected improvement over `best` for a maximization problem.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    let improvement = mean - best;
    let sd = variance.max(0.0).sqrt();
    if sd <= 1e-12 {
        return improvement.max(0.0);
    }
    let z = improvement / sd;
    (improvement * std_normal_cdf(z) + sd * std_normal_pdf(z)).max(0.0)
}

pub fn acquisition_ei(model: &SurrogateModel, candidate: &[f64], best_so_far: f64) -> f64 {
    let (mean, var) = model.predict(candidate);
    expected_improvement(mean, var, best_so_far)
}
