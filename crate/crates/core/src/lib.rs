//! Video anomaly detection with a variational autoencoder, per-regime neural
//! dynamics and a Markov jump particle filter.
//!
//! The training path runs [`pipeline::train_pipeline`]: fit the VAE, encode
//! frames into latent Gaussians, cluster generalized states into regimes,
//! learn a velocity network per regime and calibrate an anomaly threshold.
//! [`pipeline::score_frames`] then filters a new sequence and reports a
//! per-frame innovation signal.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amjpf;
pub mod cluster;
pub mod dynamics;
pub mod error;
pub mod formats;
pub mod gs;
pub mod linalg;
pub mod metrics;
pub mod mlp;
pub mod pipeline;
pub mod plot;
pub mod synth;
pub mod vae;

pub use amjpf::{AmjpfConfig, AnomalyReport, GainForm, Particle, RegimeModel};
pub use cluster::{ClusterModel, TransitionMatrix};
pub use dynamics::DynamicsNet;
pub use error::{Error, Result};
pub use gs::{GeneralizedState, UkfParams};
pub use linalg::Matrix;
pub use mlp::{Activation, MlpGrad, MlpParams};
pub use pipeline::{Bundle, PipelineConfig};
pub use vae::{Frame, LatentFrame, VaeParams};
