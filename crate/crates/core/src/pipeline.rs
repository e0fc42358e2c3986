//! End-to-end training and scoring on in-memory data.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amjpf::{calibrate_threshold, run_filter, AmjpfConfig, AnomalyReport, GainForm, RegimeModel};
use crate::cluster::{estimate_transitions, kmeans_fit};
use crate::dynamics::{build_training_pairs, train_dynamics, DynamicsConfig};
use crate::error::{Error, Result};
use crate::gs::{build_gs_sequence, UkfParams};
use crate::mlp::Activation;
use crate::vae::{encode_all, train_vae, Frame, LatentFrame, VaeConfig, VaeParams};

/// Flat configuration shared by every command. Missing keys take the
/// defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub report: Option<PathBuf>,

    pub latent_dim: usize,
    pub vae_hidden: Vec<usize>,
    pub vae_activation: Activation,
    pub vae_epochs: usize,
    pub vae_batch_size: usize,
    pub vae_learning_rate: f64,

    pub clusters: usize,
    pub transition_smoothing: f64,

    pub ukf_alpha: f64,
    pub ukf_beta: f64,
    pub ukf_kappa: f64,

    pub dyn_hidden_factor: usize,
    pub dyn_activation: Activation,
    pub dyn_epochs: usize,
    pub dyn_batch_size: usize,
    pub dyn_learning_rate: f64,

    pub particles: usize,
    pub window: usize,
    /// Resampling temperature as a fraction of the first-pass threshold.
    pub tau_factor: f64,
    pub gain: GainForm,

    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let vae = VaeConfig::default();
        let dynamics = DynamicsConfig::default();
        let ukf = UkfParams::default();
        Self {
            dataset: None,
            bundle: None,
            report: None,
            latent_dim: vae.latent_dim,
            vae_hidden: vae.hidden,
            vae_activation: vae.activation,
            vae_epochs: vae.epochs,
            vae_batch_size: vae.batch_size,
            vae_learning_rate: vae.learning_rate,
            clusters: 6,
            transition_smoothing: 1e-3,
            ukf_alpha: ukf.alpha,
            ukf_beta: ukf.beta,
            ukf_kappa: ukf.kappa,
            dyn_hidden_factor: dynamics.hidden_factor,
            dyn_activation: dynamics.activation,
            dyn_epochs: dynamics.epochs,
            dyn_batch_size: dynamics.batch_size,
            dyn_learning_rate: dynamics.learning_rate,
            particles: 100,
            window: 3,
            tau_factor: 0.1,
            gain: GainForm::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::format("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("latent_dim", self.latent_dim),
            ("vae_epochs", self.vae_epochs),
            ("vae_batch_size", self.vae_batch_size),
            ("clusters", self.clusters),
            ("dyn_hidden_factor", self.dyn_hidden_factor),
            ("dyn_batch_size", self.dyn_batch_size),
            ("particles", self.particles),
            ("window", self.window),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{key} must be at least 1")));
            }
        }
        if self.vae_hidden.contains(&0) {
            return Err(Error::invalid("vae_hidden widths must be at least 1"));
        }
        let positive = [
            ("vae_learning_rate", self.vae_learning_rate),
            ("dyn_learning_rate", self.dyn_learning_rate),
            ("ukf_alpha", self.ukf_alpha),
            ("tau_factor", self.tau_factor),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{key} must be positive, got {v}")));
            }
        }
        if !(self.transition_smoothing >= 0.0) || !self.ukf_beta.is_finite() || !self.ukf_kappa.is_finite() {
            return Err(Error::invalid("transition_smoothing, ukf_beta and ukf_kappa must be finite (smoothing >= 0)"));
        }
        Ok(())
    }

    pub fn ukf(&self) -> UkfParams {
        UkfParams {
            alpha: self.ukf_alpha,
            beta: self.ukf_beta,
            kappa: self.ukf_kappa,
        }
    }

    pub fn vae(&self) -> VaeConfig {
        VaeConfig {
            latent_dim: self.latent_dim,
            hidden: self.vae_hidden.clone(),
            activation: self.vae_activation,
            epochs: self.vae_epochs,
            batch_size: self.vae_batch_size,
            learning_rate: self.vae_learning_rate,
            seed: self.seed,
        }
    }

    pub fn dynamics(&self, cluster: usize) -> DynamicsConfig {
        DynamicsConfig {
            hidden_factor: self.dyn_hidden_factor,
            activation: self.dyn_activation,
            epochs: self.dyn_epochs,
            batch_size: self.dyn_batch_size,
            learning_rate: self.dyn_learning_rate,
            seed: self.seed.wrapping_add(1000 + cluster as u64),
        }
    }
}

/// Filter settings fixed at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub threshold: f64,
    pub filter: AmjpfConfig,
}

/// Everything `score` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub vae: VaeParams,
    pub regime: RegimeModel,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub frames: usize,
    pub vae_final_loss: f64,
    pub cluster_sizes: Vec<usize>,
    pub fallback_clusters: Vec<usize>,
    pub first_pass_threshold: f64,
    pub tau: f64,
    pub threshold: f64,
    pub train_flagged_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub bundle: Bundle,
    pub latents: Vec<LatentFrame>,
    pub train_report: AnomalyReport,
    pub summary: TrainSummary,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Fits every model on a normal training sequence and calibrates the
/// anomaly threshold on it.
pub fn train_pipeline(frames: &[Frame], cfg: &PipelineConfig) -> Result<Trained> {
    cfg.validate()?;
    if frames.len() < 3 {
        return Err(Error::invalid(format!("training needs at least 3 frames, got {}", frames.len())));
    }
    let vae = stage("vae", train_vae(frames, &cfg.vae()))?;
    let latents = stage("encode", encode_all(&vae.params, frames))?;
    let gs = stage("generalized-state", build_gs_sequence(&latents))?;
    let fit = stage("cluster", kmeans_fit(&gs, cfg.clusters, cfg.seed.wrapping_add(1)))?;
    let transitions = stage(
        "transitions",
        estimate_transitions(&fit.labels, cfg.clusters, cfg.transition_smoothing),
    )?;
    let ukf = cfg.ukf();
    let dynamics = stage(
        "dynamics",
        (0..cfg.clusters)
            .into_par_iter()
            .map(|s| {
                let pairs = build_training_pairs(&latents, &fit.labels, s, ukf)?;
                train_dynamics(s, &pairs, &fit.model.velocity_covariance(s), &cfg.dynamics(s))
            })
            .enumerate()
            .map(|(s, r)| r.map_err(|e| e.at_cluster(s)))
            .collect::<Result<Vec<_>>>(),
    )?;
    let regime = RegimeModel {
        clusters: fit.model,
        transitions,
        dynamics,
    };

    // First pass with uniform resampling fixes the temperature, second pass
    // calibrates the threshold under that temperature.
    let mut filter = AmjpfConfig {
        particles: cfg.particles,
        ukf,
        tau: f64::INFINITY,
        window: cfg.window,
        gain: cfg.gain,
        seed: cfg.seed,
    };
    let first = stage("calibrate", run_filter(&regime, &latents, &filter))?;
    let first_threshold = stage("calibrate", calibrate_threshold(&first.y))?;
    filter.tau = (cfg.tau_factor * first_threshold).max(f64::MIN_POSITIVE);
    let second = stage("calibrate", run_filter(&regime, &latents, &filter))?;
    let threshold = stage("calibrate", calibrate_threshold(&second.y))?;
    let train_report = AnomalyReport::from_trace(second, threshold, cfg.window);

    let summary = TrainSummary {
        frames: frames.len(),
        vae_final_loss: vae.step_losses.last().copied().unwrap_or(f64::NAN),
        cluster_sizes: regime.clusters.counts.clone(),
        fallback_clusters: regime
            .dynamics
            .iter()
            .filter(|d| d.fallback)
            .map(|d| d.cluster)
            .collect(),
        first_pass_threshold: first_threshold,
        tau: filter.tau,
        threshold,
        train_flagged_fraction: train_report.flagged_fraction(),
    };
    Ok(Trained {
        bundle: Bundle {
            vae: vae.params,
            regime,
            calibration: Calibration { threshold, filter },
        },
        latents,
        train_report,
        summary,
    })
}

pub fn score_latents(bundle: &Bundle, latents: &[LatentFrame]) -> Result<AnomalyReport> {
    let cal = &bundle.calibration;
    let trace = stage("score", run_filter(&bundle.regime, latents, &cal.filter))?;
    Ok(AnomalyReport::from_trace(trace, cal.threshold, cal.filter.window))
}

pub fn score_frames(bundle: &Bundle, frames: &[Frame]) -> Result<AnomalyReport> {
    let latents = stage("encode", encode_all(&bundle.vae, frames))?;
    score_latents(bundle, &latents)
}
