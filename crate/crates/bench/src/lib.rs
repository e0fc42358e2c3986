//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lmjf_core::cluster::{ClusterModel, FeatureScaling, TransitionMatrix};
use lmjf_core::{Activation, DynamicsNet, LatentFrame, Matrix, MlpParams, RegimeModel};

/// A regime model with `clusters` random tanh dynamics networks.
pub fn random_regime(clusters: usize, latent_dim: usize, seed: u64) -> RegimeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 2 * latent_dim;
    let probs = Matrix::from_vec(clusters, clusters, vec![1.0 / clusters as f64; clusters * clusters])
        .expect("uniform transitions");
    RegimeModel {
        clusters: ClusterModel {
            centroids: vec![vec![0.0; d]; clusters],
            covariances: vec![Matrix::identity(d).scale(0.01); clusters],
            radii: vec![1.0; clusters],
            counts: vec![10; clusters],
            scaling: FeatureScaling {
                offset: vec![0.0; d],
                scale: vec![1.0; d],
            },
        },
        transitions: TransitionMatrix { probs, smoothing: 0.0 },
        dynamics: (0..clusters)
            .map(|s| DynamicsNet {
                cluster: s,
                net: MlpParams::random(&[latent_dim, 4 * latent_dim, latent_dim], Activation::Tanh, &mut rng)
                    .expect("valid sizes"),
                noise: Matrix::identity(latent_dim).scale(1e-3),
                fallback: false,
            })
            .collect(),
    }
}

/// A smooth latent trajectory with small per-frame variances.
pub fn latent_sequence(frames: usize, latent_dim: usize, seed: u64) -> Vec<LatentFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|k| {
            let t = k as f64 * 0.1;
            let mu = (0..latent_dim).map(|i| (t + i as f64).sin()).collect();
            let s2 = (0..latent_dim).map(|_| rng.random_range(0.01..0.05)).collect();
            LatentFrame::new(mu, s2).expect("valid latent")
        })
        .collect()
}
