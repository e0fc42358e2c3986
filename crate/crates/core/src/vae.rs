//! Dense variational autoencoder: frames in, per-frame latent Gaussians out.
//!
//! The encoder emits `2L` values, a mean head and a log-variance head. The
//! decoder maps an `L`-dimensional code back to pixel logits, squashed by a
//! sigmoid. Training minimizes the negated evidence lower bound with a
//! standard-normal prior, a Bernoulli pixel likelihood and one
//! reparameterized sample per frame.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mlp::{Activation, Adam, MlpGrad, MlpParams};

pub const SIGMA2_MIN: f64 = 1e-8;
pub const SIGMA2_MAX: f64 = 1e8;

/// A grayscale frame with pixels in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::invalid(format!(
                "frame of {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// Index of the brightest pixel as `(x, y)`; first one wins on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &p) in self.pixels.iter().enumerate() {
            if p > self.pixels[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn mean_abs_diff(&self, other: &Frame) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.pixels.len().max(1) as f64
    }
}

/// Per-frame latent Gaussian `N(mu, diag(sigma2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFrame {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl LatentFrame {
    pub fn new(mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma2.len() {
            return Err(Error::invalid("latent mean and variance lengths differ"));
        }
        if mu.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite latent mean"));
        }
        if sigma2.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::numeric("latent variances must be finite and positive"));
        }
        Ok(Self { mu, sigma2 })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    latent_dim: usize,
    width: usize,
    height: usize,
}

impl VaeParams {
    pub fn from_parts(
        encoder: MlpParams,
        decoder: MlpParams,
        latent_dim: usize,
        (width, height): (usize, usize),
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if encoder.output_dim() != 2 * latent_dim {
            return Err(Error::invalid(format!(
                "encoder emits {} values, expected {}",
                encoder.output_dim(),
                2 * latent_dim
            )));
        }
        if decoder.input_dim() != latent_dim {
            return Err(Error::invalid("decoder input must equal latent dimension"));
        }
        if decoder.output_dim() != encoder.input_dim() || encoder.input_dim() != width * height {
            return Err(Error::invalid(format!(
                "encoder input and decoder output must both be {width}x{height}"
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            width,
            height,
        })
    }

    /// Randomly initialized network; `hidden` lists encoder hidden widths and
    /// is mirrored for the decoder.
    pub fn random(
        (width, height): (usize, usize),
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let (enc, dec) = layer_sizes(width * height, hidden, latent_dim);
        let encoder = MlpParams::random(&enc, activation, rng)?;
        let decoder = MlpParams::random(&dec, activation, rng)?;
        Self::from_parts(encoder, decoder, latent_dim, (width, height))
    }

    pub fn zeros((width, height): (usize, usize), hidden: &[usize], latent_dim: usize) -> Result<Self> {
        let (enc, dec) = layer_sizes(width * height, hidden, latent_dim);
        Self::from_parts(
            MlpParams::zeros(&enc, Activation::Tanh)?,
            MlpParams::zeros(&dec, Activation::Tanh)?,
            latent_dim,
            (width, height),
        )
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn pixels(&self) -> usize {
        self.encoder.input_dim()
    }
}

fn layer_sizes(pixels: usize, hidden: &[usize], latent: usize) -> (Vec<usize>, Vec<usize>) {
    let mut enc = vec![pixels];
    enc.extend_from_slice(hidden);
    enc.push(2 * latent);
    let mut dec = vec![latent];
    dec.extend(hidden.iter().rev());
    dec.push(pixels);
    (enc, dec)
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn clamp_log_var(lv: f64) -> (f64, bool) {
    let (lo, hi) = (SIGMA2_MIN.ln(), SIGMA2_MAX.ln());
    if lv < lo {
        (lo, true)
    } else if lv > hi {
        (hi, true)
    } else {
        (lv, false)
    }
}

pub fn encode(p: &VaeParams, x: &Frame) -> Result<LatentFrame> {
    if (x.width, x.height) != (p.width, p.height) {
        return Err(Error::invalid(format!(
            "frame is {}x{}, encoder expects {}x{}",
            x.width, x.height, p.width, p.height
        )));
    }
    let out = p.encoder.forward(&x.pixels)?;
    let l = p.latent_dim;
    let mu = out[..l].to_vec();
    let sigma2 = out[l..].iter().map(|&lv| clamp_log_var(lv).0.exp()).collect();
    LatentFrame::new(mu, sigma2)
}

/// `z = mu + sigma ⊙ noise`.
pub fn reparameterize(lf: &LatentFrame, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != lf.dim() {
        return Err(Error::invalid("noise length must equal latent dimension"));
    }
    Ok(lf
        .mu
        .iter()
        .zip(&lf.sigma2)
        .zip(noise)
        .map(|((m, s2), e)| m + s2.sqrt() * e)
        .collect())
}

pub fn decode(p: &VaeParams, z: &[f64]) -> Result<Frame> {
    let logits = p.decoder.forward(z)?;
    let pixels = logits.into_iter().map(sigmoid).collect();
    Frame::new(p.width, p.height, pixels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    /// `kl + recon`, the quantity minimized.
    pub loss: f64,
    pub kl: f64,
    pub recon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrad {
    pub encoder: MlpGrad,
    pub decoder: MlpGrad,
}

impl VaeGrad {
    pub fn zeros_like(p: &VaeParams) -> Self {
        Self {
            encoder: MlpGrad::zeros_like(&p.encoder),
            decoder: MlpGrad::zeros_like(&p.decoder),
        }
    }

    pub fn add_assign(&mut self, other: &VaeGrad) {
        self.encoder.add_assign(&other.encoder);
        self.decoder.add_assign(&other.decoder);
    }

    pub fn scale(&mut self, s: f64) {
        self.encoder.scale(s);
        self.decoder.scale(s);
    }
}

pub fn elbo_loss(p: &VaeParams, x: &Frame, noise: &[f64]) -> Result<ElboTerms> {
    elbo_with_grad(p, x, noise, false).map(|(t, _)| t)
}

/// Single-sample negated ELBO and its gradient at fixed `noise`.
pub fn elbo_grad(p: &VaeParams, x: &Frame, noise: &[f64]) -> Result<(ElboTerms, VaeGrad)> {
    elbo_with_grad(p, x, noise, true).map(|(t, g)| (t, g.expect("gradient requested")))
}

fn elbo_with_grad(
    p: &VaeParams,
    x: &Frame,
    noise: &[f64],
    want_grad: bool,
) -> Result<(ElboTerms, Option<VaeGrad>)> {
    let l = p.latent_dim;
    if noise.len() != l {
        return Err(Error::invalid("noise length must equal latent dimension"));
    }
    if (x.width, x.height) != (p.width, p.height) {
        return Err(Error::invalid("frame size does not match the encoder"));
    }
    let enc_trace = p.encoder.forward_trace(&x.pixels)?;
    let head = enc_trace.output();
    let mu = &head[..l];
    let mut log_var = Vec::with_capacity(l);
    let mut clamped = Vec::with_capacity(l);
    for &lv in &head[l..] {
        let (v, c) = clamp_log_var(lv);
        log_var.push(v);
        clamped.push(c);
    }
    let std: Vec<f64> = log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
    let z: Vec<f64> = (0..l).map(|i| mu[i] + std[i] * noise[i]).collect();

    let kl: f64 = (0..l)
        .map(|i| 0.5 * (std[i] * std[i] + mu[i] * mu[i] - 1.0 - log_var[i]))
        .sum();

    let dec_trace = p.decoder.forward_trace(&z)?;
    let logits = dec_trace.output();
    let recon: f64 = logits
        .iter()
        .zip(&x.pixels)
        .map(|(&a, &t)| softplus(a) - t * a)
        .sum();

    let terms = ElboTerms {
        loss: kl + recon,
        kl,
        recon,
    };
    if !terms.loss.is_finite() {
        return Err(Error::numeric("non-finite ELBO"));
    }
    if !want_grad {
        return Ok((terms, None));
    }

    let d_logits: Vec<f64> = logits
        .iter()
        .zip(&x.pixels)
        .map(|(&a, &t)| sigmoid(a) - t)
        .collect();
    let mut grad = VaeGrad::zeros_like(p);
    let d_z = p.decoder.backward_into(&dec_trace, &d_logits, &mut grad.decoder);

    let mut d_head = vec![0.0; 2 * l];
    for i in 0..l {
        d_head[i] = d_z[i] + mu[i];
        if !clamped[i] {
            let var = std[i] * std[i];
            d_head[l + i] = d_z[i] * 0.5 * std[i] * noise[i] + 0.5 * (var - 1.0);
        }
    }
    p.encoder.backward_into(&enc_trace, &d_head, &mut grad.encoder);
    Ok((terms, Some(grad)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            hidden: vec![64],
            activation: Activation::Tanh,
            epochs: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VaeTraining {
    pub params: VaeParams,
    /// Mean per-frame loss of every mini-batch, in order.
    pub step_losses: Vec<f64>,
}

/// Mini-batch Adam on the summed negated ELBO. Each epoch shuffles the
/// frames; all randomness comes from one generator seeded by `cfg.seed`.
pub fn train_vae(frames: &[Frame], cfg: &VaeConfig) -> Result<VaeTraining> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("no frames to train on"))?;
    let shape = (first.width, first.height);
    if frames.iter().any(|f| (f.width, f.height) != shape) {
        return Err(Error::invalid("frames differ in size"));
    }
    if cfg.batch_size == 0 || cfg.latent_dim == 0 {
        return Err(Error::invalid("batch size and latent dimension must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = VaeParams::random(shape, &cfg.hidden, cfg.latent_dim, cfg.activation, &mut rng)?;
    let mut enc_opt = Adam::new(&params.encoder, cfg.learning_rate);
    let mut dec_opt = Adam::new(&params.decoder, cfg.learning_rate);
    let l = cfg.latent_dim;

    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let jobs: Vec<(usize, Vec<f64>)> = batch
                .iter()
                .map(|&i| (i, (0..l).map(|_| StandardNormal.sample(&mut rng)).collect()))
                .collect();
            let results: Vec<Result<(ElboTerms, VaeGrad)>> = jobs
                .par_iter()
                .map(|(i, noise)| elbo_grad(&params, &frames[*i], noise))
                .collect();
            let mut total = VaeGrad::zeros_like(&params);
            let mut loss = 0.0;
            for r in results {
                let (terms, g) = r.map_err(|e| Error::TrainingFailure {
                    epoch,
                    detail: e.to_string(),
                })?;
                loss += terms.loss;
                total.add_assign(&g);
            }
            let n = batch.len() as f64;
            total.scale(1.0 / n);
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    epoch,
                    detail: "loss is not finite".into(),
                });
            }
            let step = |e: Error| Error::TrainingFailure {
                epoch,
                detail: e.to_string(),
            };
            enc_opt.step(&mut params.encoder, &total.encoder).map_err(step)?;
            dec_opt.step(&mut params.decoder, &total.decoder).map_err(step)?;
            step_losses.push(loss);
        }
    }
    Ok(VaeTraining {
        params,
        step_losses,
    })
}

pub fn encode_all(p: &VaeParams, frames: &[Frame]) -> Result<Vec<LatentFrame>> {
    frames
        .par_iter()
        .enumerate()
        .map(|(k, f)| encode(p, f).map_err(|e| e.at_frame(k)))
        .collect()
}
