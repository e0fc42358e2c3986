//! Generalized states (latent mean stacked with its first difference) and the
//! unscented transform used both for augmenting dynamics training data and
//! inside the filter.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::vae::LatentFrame;

/// `[mu; mu_dot]`, with `mu_dot` the backward difference ending at this frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneralizedState {
    pub mu: Vec<f64>,
    pub mu_dot: Vec<f64>,
}

impl GeneralizedState {
    pub fn new(mu: Vec<f64>, mu_dot: Vec<f64>) -> Result<Self> {
        if mu.len() != mu_dot.len() {
            return Err(Error::invalid("mean and derivative lengths differ"));
        }
        if mu.iter().chain(&mu_dot).any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite generalized state"));
        }
        Ok(Self { mu, mu_dot })
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.len()
    }

    /// The stacked `2L` vector.
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.mu.clone();
        v.extend_from_slice(&self.mu_dot);
        v
    }

    pub fn from_stacked(v: &[f64]) -> Result<Self> {
        if !v.len().is_multiple_of(2) {
            return Err(Error::invalid("stacked state must have even length"));
        }
        let l = v.len() / 2;
        Self::new(v[..l].to_vec(), v[l..].to_vec())
    }
}

/// Entry `j` pairs `latents[j + 1].mu` with `latents[j + 1].mu − latents[j].mu`,
/// so the output is one shorter than the input.
pub fn build_gs_sequence(latents: &[LatentFrame]) -> Result<Vec<GeneralizedState>> {
    if latents.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 latent frames, got {}",
            latents.len()
        )));
    }
    let l = latents[0].dim();
    if latents.iter().any(|f| f.dim() != l) {
        return Err(Error::invalid("latent frames differ in dimension"));
    }
    latents
        .windows(2)
        .map(|w| {
            let mu_dot = w[1].mu.iter().zip(&w[0].mu).map(|(a, b)| a - b).collect();
            GeneralizedState::new(w[1].mu.clone(), mu_dot)
        })
        .collect()
}

/// Scaling of the unscented transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self {
            alpha: 1e-1,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UkfParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPointSet {
    /// `2n + 1` points: the mean, then `mean + cols`, then `mean − cols`.
    pub points: Vec<Vec<f64>>,
    pub mean_weights: Vec<f64>,
    pub cov_weights: Vec<f64>,
    pub params: UkfParams,
    pub lambda: f64,
}

impl SigmaPointSet {
    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

pub fn sigma_points(mean: &[f64], cov: &Matrix, params: UkfParams) -> Result<SigmaPointSet> {
    let n = mean.len();
    if cov.shape() != (n, n) {
        return Err(Error::invalid(format!(
            "covariance is {:?}, mean has length {n}",
            cov.shape()
        )));
    }
    let lambda = params.lambda(n);
    let spread = n as f64 + lambda;
    if !(spread > 0.0) {
        return Err(Error::invalid(format!(
            "n + lambda must be positive (n={n}, lambda={lambda})"
        )));
    }
    let root = cov.scale(spread).sqrt_psd()?;
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(mean.to_vec());
    for sign in [1.0, -1.0] {
        for i in 0..n {
            points.push((0..n).map(|r| mean[r] + sign * root[(r, i)]).collect());
        }
    }
    let w0 = lambda / spread;
    let wi = 1.0 / (2.0 * spread);
    let mut mean_weights = vec![wi; 2 * n + 1];
    mean_weights[0] = w0;
    let mut cov_weights = mean_weights.clone();
    cov_weights[0] = w0 + (1.0 - params.alpha * params.alpha + params.beta);
    Ok(SigmaPointSet {
        points,
        mean_weights,
        cov_weights,
        params,
        lambda,
    })
}

/// Weighted mean and (symmetrized) covariance of transformed sigma points.
pub fn unscented_stats(set: &SigmaPointSet, transformed: &[Vec<f64>]) -> Result<(Vec<f64>, Matrix)> {
    if transformed.len() != set.points.len() {
        return Err(Error::invalid(format!(
            "{} transformed points for {} sigma points",
            transformed.len(),
            set.points.len()
        )));
    }
    let m = transformed[0].len();
    if transformed.iter().any(|t| t.len() != m) {
        return Err(Error::invalid("transformed points differ in dimension"));
    }
    let mut mean = vec![0.0; m];
    for (w, t) in set.mean_weights.iter().zip(transformed) {
        for (acc, v) in mean.iter_mut().zip(t) {
            *acc += w * v;
        }
    }
    let mut cov = Matrix::zeros(m, m);
    let mut dev = vec![0.0; m];
    for (w, t) in set.cov_weights.iter().zip(transformed) {
        for ((d, v), mu) in dev.iter_mut().zip(t).zip(&mean) {
            *d = v - mu;
        }
        for r in 0..m {
            let wr = w * dev[r];
            if wr == 0.0 {
                continue;
            }
            for (c, acc) in cov.row_mut(r).iter_mut().enumerate() {
                *acc += wr * dev[c];
            }
        }
    }
    cov.symmetrize();
    Ok((mean, cov))
}
