//! Per-regime velocity models.
//!
//! Each cluster gets a small network mapping a latent mean to the next
//! frame's velocity. Training data is augmented with sigma points of the
//! encoder's per-frame Gaussians so the network also sees the spread the
//! encoder reports. Clusters with too few samples fall back to a
//! constant-velocity model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gs::{sigma_points, UkfParams};
use crate::linalg::Matrix;
use crate::mlp::{Activation, Adam, MlpGrad, MlpParams};
use crate::vae::LatentFrame;

pub const NOISE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Training pairs for `cluster`.
///
/// `labels[j]` is the cluster of the generalized state built from latents
/// `j` and `j + 1` (see [`crate::gs::build_gs_sequence`]). Every labelled
/// state that has a successor contributes the base pair `mu_k → mu_{k+1} − mu_k`
/// followed by `2L` sigma-point pairs.
pub fn build_training_pairs(
    latents: &[LatentFrame],
    labels: &[usize],
    cluster: usize,
    ukf: UkfParams,
) -> Result<Vec<TrainingPair>> {
    if latents.len() < 2 || labels.len() + 1 != latents.len() {
        return Err(Error::invalid(format!(
            "{} labels do not align with {} latent frames",
            labels.len(),
            latents.len()
        )));
    }
    let mut pairs = Vec::new();
    for j in 0..labels.len().saturating_sub(1) {
        if labels[j] != cluster {
            continue;
        }
        let now = &latents[j + 1];
        let next = &latents[j + 2];
        let a = sigma_points(&now.mu, &Matrix::from_diag(&now.sigma2), ukf)?;
        let b = sigma_points(&next.mu, &Matrix::from_diag(&next.sigma2), ukf)?;
        for (x, y) in a.points.into_iter().zip(b.points) {
            let target = y.iter().zip(&x).map(|(p, q)| p - q).collect();
            pairs.push(TrainingPair { input: x, target });
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    /// Hidden width as a multiple of the latent dimension.
    pub hidden_factor: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self {
            hidden_factor: 4,
            activation: Activation::Tanh,
            epochs: 200,
            batch_size: 32,
            learning_rate: 5e-3,
            seed: 0,
        }
    }
}

/// Smallest pair count for which a network is trained.
pub fn min_pairs(latent_dim: usize) -> usize {
    10 * 2 * latent_dim
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsNet {
    pub cluster: usize,
    pub net: MlpParams,
    /// Diagonal process noise, `L × L`.
    pub noise: Matrix,
    /// Constant-velocity model instead of the network.
    pub fallback: bool,
}

impl DynamicsNet {
    pub fn latent_dim(&self) -> usize {
        self.noise.rows()
    }

    /// Constant-velocity model with the given per-dimension noise.
    pub fn constant_velocity(cluster: usize, noise_diag: &[f64]) -> Result<Self> {
        let l = noise_diag.len();
        Ok(Self {
            cluster,
            net: MlpParams::zeros(&[l, l], Activation::Identity)?,
            noise: Matrix::from_diag(&floor_noise(noise_diag)),
            fallback: true,
        })
    }

    /// Next-frame velocity from the current mean. The fallback model returns
    /// the caller's current velocity.
    pub fn predict_velocity(&self, mu: &[f64], mu_dot: &[f64]) -> Result<Vec<f64>> {
        let l = self.latent_dim();
        if mu.len() != l || mu_dot.len() != l {
            return Err(Error::invalid(format!(
                "dynamics for L={l} given vectors of length {} and {}",
                mu.len(),
                mu_dot.len()
            )));
        }
        if self.fallback {
            return Ok(mu_dot.to_vec());
        }
        let v = self.net.forward(mu)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric("non-finite velocity prediction"));
        }
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.latent_dim();
        if !self.noise.is_square() || self.net.input_dim() != l || self.net.output_dim() != l {
            return Err(Error::invalid(format!(
                "dynamics model {} has inconsistent dimensions",
                self.cluster
            )));
        }
        for r in 0..l {
            for c in 0..l {
                let v = self.noise[(r, c)];
                if (r == c && !(v >= NOISE_FLOOR)) || (r != c && v != 0.0) {
                    return Err(Error::invalid(format!(
                        "dynamics model {} noise must be diagonal with entries >= {NOISE_FLOOR}",
                        self.cluster
                    )));
                }
            }
        }
        Ok(())
    }
}

fn floor_noise(diag: &[f64]) -> Vec<f64> {
    diag.iter().map(|v| v.max(NOISE_FLOOR)).collect()
}

/// Trains the velocity network for one cluster, or falls back to constant
/// velocity (noise taken from `fallback_noise`, the cluster's velocity
/// covariance) when there are fewer than [`min_pairs`] pairs.
pub fn train_dynamics(
    cluster: usize,
    pairs: &[TrainingPair],
    fallback_noise: &Matrix,
    cfg: &DynamicsConfig,
) -> Result<DynamicsNet> {
    let l = fallback_noise.rows();
    if pairs.len() < min_pairs(l) {
        return DynamicsNet::constant_velocity(cluster, &fallback_noise.diag());
    }
    if pairs.iter().any(|p| p.input.len() != l || p.target.len() != l) {
        return Err(Error::invalid("training pairs do not match the latent dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = (cfg.hidden_factor * l).max(1);
    let mut net = MlpParams::random(&[l, hidden, l], cfg.activation, &mut rng)?;
    let mut opt = Adam::new(&net, cfg.learning_rate);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let batch = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut g = MlpGrad::zeros_like(&net);
            for &i in chunk {
                let (loss, gi) = net.squared_error_grad(&pairs[i].input, &pairs[i].target)?;
                if !loss.is_finite() {
                    return Err(Error::TrainingFailure {
                        epoch,
                        detail: format!("cluster {cluster}: loss is not finite"),
                    });
                }
                g.add_assign(&gi);
            }
            g.scale(1.0 / chunk.len() as f64);
            opt.step(&mut net, &g).map_err(|e| Error::TrainingFailure {
                epoch,
                detail: format!("cluster {cluster}: {e}"),
            })?;
        }
    }

    let residuals: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            net.forward(&p.input)
                .map(|y| y.iter().zip(&p.target).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    let n = residuals.len() as f64;
    let mut mean = vec![0.0; l];
    for r in &residuals {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; l];
    for r in &residuals {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Ok(DynamicsNet {
        cluster,
        net,
        noise: Matrix::from_diag(&floor_noise(&var)),
        fallback: false,
    })
}
