//! Gaussian process model of a road boundary `y = f(x)` and the iterative
//! outlier filter built on it.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GprHyperparams {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    pub outlier_sigma: f64,
    pub max_iterations: usize,
    /// Per iteration, drop a violating point only if no violator within one
    /// length scale has a larger standardized residual. A large outlier drags
    /// the posterior mean over its neighbors; without this they are dropped
    /// along with it.
    pub suppress_neighbors: bool,
}

impl Default for GprHyperparams {
    fn default() -> Self {
        Self {
            length_scale: 4.0,
            signal_variance: 1.0,
            noise_variance: 0.01,
            outlier_sigma: 3.0,
            max_iterations: 5,
            suppress_neighbors: true,
        }
    }
}

impl GprHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.length_scale > 0.0
            && self.signal_variance > 0.0
            && self.noise_variance > 0.0
            && self.outlier_sigma >= 1.0
            && self.max_iterations >= 1
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid GPR hyperparameters: {self:?}")))
        }
    }

    /// Squared-exponential covariance.
    #[inline]
    pub fn kernel(&self, a: f64, b: f64) -> f64 {
        let d = a - b;
        self.signal_variance * (-(d * d) / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

/// Zero-mean GP posterior conditioned on `(x, y)` pairs.
#[derive(Debug, Clone)]
pub struct BoundaryModel {
    pub training_inputs: Vec<f64>,
    pub training_targets: Vec<f64>,
    pub hyper: GprHyperparams,
    /// Noise variance actually used after any escalation.
    pub effective_noise: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

pub fn kernel_matrix(xs: &[f64], hyper: &GprHyperparams, noise: f64) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| hyper.kernel(xs[i], xs[j]) + if i == j { noise } else { 0.0 })
}

pub fn gpr_fit(points: &[(f64, f64)], hyper: &GprHyperparams) -> Result<BoundaryModel> {
    if points.is_empty() {
        return Err(Error::Underdetermined(0));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mut noise = hyper.noise_variance;
    for attempt in 0..=3 {
        if let Some(chol) = Cholesky::new(kernel_matrix(&xs, hyper, noise)) {
            let alpha = chol.solve(&DVector::from_column_slice(&ys));
            return Ok(BoundaryModel {
                training_inputs: xs,
                training_targets: ys,
                hyper: hyper.clone(),
                effective_noise: noise,
                chol,
                alpha,
            });
        }
        if attempt < 3 {
            log::warn!("GPR factorization failed, raising noise to {}", noise * 10.0);
            noise *= 10.0;
        }
    }
    Err(Error::GprFactorization(points.len()))
}

impl BoundaryModel {
    fn cross_cov(&self, x: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.training_inputs.len(),
            self.training_inputs.iter().map(|&t| self.hyper.kernel(x, t)),
        )
    }

    /// Posterior mean and variance of the latent function at `x`.
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let ks = self.cross_cov(x);
        let mean = ks.dot(&self.alpha);
        let v = self
            .chol
            .l()
            .solve_lower_triangular(&ks)
            .expect("Cholesky factor has a positive diagonal");
        let var = self.hyper.kernel(x, x) - v.dot(&v);
        (mean, var.max(0.0))
    }
}

pub fn gpr_predict(model: &BoundaryModel, x: f64) -> (f64, f64) {
    model.predict(x)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct FilterOutcome {
    /// Indices into the input, ascending.
    pub inliers: Vec<usize>,
    pub outliers: Vec<usize>,
    pub iterations: usize,
    /// Set when the input was too small to filter.
    pub too_few_points: bool,
}

/// Repeatedly fit on the current inliers and drop points whose residual
/// exceeds `outlier_sigma` predictive standard deviations (see
/// [`GprHyperparams::suppress_neighbors`]). The fit uses targets centered on
/// the inlier mean.
pub fn iterative_filter(points: &[(f64, f64)], hyper: &GprHyperparams) -> Result<FilterOutcome> {
    let all: Vec<usize> = (0..points.len()).collect();
    if points.len() < 4 {
        log::warn!("GPR filter: {} point(s), skipping", points.len());
        return Ok(FilterOutcome { inliers: all, too_few_points: true, ..Default::default() });
    }
    let mut inliers = all;
    let mut iterations = 0;
    while iterations < hyper.max_iterations {
        iterations += 1;
        let offset = inliers.iter().map(|&i| points[i].1).sum::<f64>() / inliers.len() as f64;
        let train: Vec<(f64, f64)> = inliers.iter().map(|&i| (points[i].0, points[i].1 - offset)).collect();
        let model = gpr_fit(&train, hyper)?;
        let noise = model.effective_noise;
        // standardized residual of each current inlier
        let z: Vec<f64> = inliers
            .iter()
            .map(|&i| {
                let (x, y) = points[i];
                let (mean, var) = model.predict(x);
                (y - offset - mean).abs() / (var + noise).sqrt()
            })
            .collect();
        let violators: Vec<usize> = (0..inliers.len()).filter(|&k| z[k] > hyper.outlier_sigma).collect();
        let dominated = |k: usize| {
            hyper.suppress_neighbors
                && violators.iter().any(|&j| {
                    j != k
                        && (points[inliers[j]].0 - points[inliers[k]].0).abs() <= hyper.length_scale
                        && (z[j] > z[k] || (z[j] == z[k] && j < k))
                })
        };
        let removed: Vec<usize> = violators.iter().copied().filter(|&k| !dominated(k)).collect();
        let kept: Vec<usize> = (0..inliers.len())
            .filter(|k| removed.binary_search(k).is_err())
            .map(|k| inliers[k])
            .collect();
        if kept.len() == inliers.len() {
            break;
        }
        if kept.len() < 2 {
            log::warn!("GPR filter: inlier set would drop below 2, stopping");
            break;
        }
        inliers = kept;
    }
    let mut is_in = vec![false; points.len()];
    for &i in &inliers {
        is_in[i] = true;
    }
    let outliers = (0..points.len()).filter(|&i| !is_in[i]).collect();
    Ok(FilterOutcome { inliers, outliers, iterations, too_few_points: false })
}
