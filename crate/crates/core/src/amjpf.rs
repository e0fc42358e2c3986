//! Particle filter over regime labels with an unscented Kalman filter per
//! particle, plus innovation-based anomaly scoring.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cluster::{ClusterModel, TransitionMatrix};
use crate::dynamics::DynamicsNet;
use crate::error::{Error, Result};
use crate::gs::{sigma_points, unscented_stats, SigmaPointSet, UkfParams};
use crate::linalg::Matrix;
use crate::vae::LatentFrame;

/// Jitter added once when a covariance fails the square-root check.
pub const REPAIR_JITTER: f64 = 1e-9;

/// Form of the Kalman gain used in the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainForm {
    /// `K = P[:, ..L] (P^L + Σ)^-1`, the gain of a linear Kalman filter that
    /// observes the latent mean.
    #[default]
    CrossCovariance,
    /// `K = [P^L; I] (P^L + Σ)^-1`. Moves the velocity by the same amount as
    /// the mean, which can drive the velocity block of `P` negative.
    Literal,
}

impl GainForm {
    pub fn name(self) -> &'static str {
        match self {
            GainForm::CrossCovariance => "cross-covariance",
            GainForm::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cross-covariance" => Ok(GainForm::CrossCovariance),
            "literal" => Ok(GainForm::Literal),
            other => Err(Error::invalid(format!("unknown gain form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmjpfConfig {
    pub particles: usize,
    pub ukf: UkfParams,
    /// Resampling temperature. `f64::INFINITY` resamples uniformly.
    pub tau: f64,
    pub window: usize,
    pub gain: GainForm,
    pub seed: u64,
}

impl Default for AmjpfConfig {
    fn default() -> Self {
        Self {
            particles: 100,
            ukf: UkfParams::default(),
            tau: f64::INFINITY,
            window: 3,
            gain: GainForm::default(),
            seed: 0,
        }
    }
}

impl AmjpfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::invalid("particle count must be at least 1"));
        }
        if self.window == 0 {
            return Err(Error::invalid("anomaly window must be at least 1"));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Everything the filter needs from training.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeModel {
    pub clusters: ClusterModel,
    pub transitions: TransitionMatrix,
    pub dynamics: Vec<DynamicsNet>,
}

impl RegimeModel {
    pub fn num_clusters(&self) -> usize {
        self.clusters.num_clusters()
    }

    pub fn latent_dim(&self) -> usize {
        self.clusters.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.clusters.validate()?;
        self.transitions.validate()?;
        let c = self.num_clusters();
        let l = self.latent_dim();
        if self.transitions.num_clusters() != c {
            return Err(Error::invalid(format!(
                "transition matrix covers {} clusters, model has {c}",
                self.transitions.num_clusters()
            )));
        }
        if self.dynamics.len() != c {
            return Err(Error::invalid(format!(
                "{} dynamics models for {c} clusters",
                self.dynamics.len()
            )));
        }
        for (s, d) in self.dynamics.iter().enumerate() {
            d.validate().map_err(|e| e.at_cluster(s))?;
            if d.latent_dim() != l || d.cluster != s {
                return Err(Error::invalid("dynamics model does not match its cluster").at_cluster(s));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub label: usize,
    /// Generalized-state mean `[mu; mu_dot]`.
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub weight: f64,
    pub predicted: Vec<f64>,
    pub updated: Vec<f64>,
}

impl Particle {
    pub fn latent_dim(&self) -> usize {
        self.mean.len() / 2
    }

    /// Mean absolute difference between the updated and predicted latent means.
    pub fn innovation(&self) -> f64 {
        let l = self.latent_dim();
        let s: f64 = (0..l).map(|i| (self.updated[i] - self.predicted[i]).abs()).sum();
        s / l as f64
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn init_filter(
    model: &RegimeModel,
    cfg: &AmjpfConfig,
    first: &LatentFrame,
    rng: &mut impl Rng,
) -> Result<Vec<Particle>> {
    cfg.validate()?;
    model.validate()?;
    let l = model.latent_dim();
    if first.dim() != l {
        return Err(Error::invalid(format!(
            "first latent has dimension {}, model expects {l}",
            first.dim()
        )));
    }
    let priors = model.clusters.priors();
    let mut mean = first.mu.clone();
    mean.resize(2 * l, 0.0);
    let w = 1.0 / cfg.particles as f64;
    let pos = Matrix::from_diag(&first.sigma2);
    Ok((0..cfg.particles)
        .map(|_| {
            let label = sample_index(&priors, rng.random());
            let cov = Matrix::block_diag(&pos, &model.clusters.velocity_covariance(label));
            Particle {
                label,
                mean: mean.clone(),
                cov,
                weight: w,
                predicted: mean.clone(),
                updated: mean.clone(),
            }
        })
        .collect())
}

fn sigma_points_repaired(mean: &[f64], cov: &mut Matrix, ukf: UkfParams) -> Result<SigmaPointSet> {
    match sigma_points(mean, cov, ukf) {
        Err(Error::NumericDomain(_)) => {
            cov.symmetrize();
            cov.add_diag(REPAIR_JITTER);
            sigma_points(mean, cov, ukf)
        }
        other => other,
    }
}

fn predict_one(p: &mut Particle, model: &RegimeModel, ukf: UkfParams, u: f64) -> Result<()> {
    let l = p.latent_dim();
    p.label = model.transitions.sample(p.label, u);
    let dynamics = &model.dynamics[p.label];
    let set = sigma_points_repaired(&p.mean, &mut p.cov, ukf)?;
    let moved = set
        .points
        .iter()
        .map(|z| {
            let (mu, mu_dot) = z.split_at(l);
            let v = dynamics.predict_velocity(mu, mu_dot)?;
            let mut out: Vec<f64> = mu.iter().zip(&v).map(|(a, b)| a + b).collect();
            out.extend_from_slice(&v);
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, cov) = unscented_stats(&set, &moved)?;
    let noise = Matrix::block_diag(&dynamics.noise, &dynamics.noise);
    p.cov = cov.add(&noise)?;
    p.predicted = mean.clone();
    p.mean = mean;
    Ok(())
}

/// Moves every particle one frame forward. Labels jump according to the
/// transition matrix; the continuous state goes through the dynamics of
/// the new label.
pub fn predict_step(
    particles: &mut [Particle],
    model: &RegimeModel,
    cfg: &AmjpfConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let draws: Vec<f64> = (0..particles.len()).map(|_| rng.random()).collect();
    particles
        .par_iter_mut()
        .zip(draws.par_iter())
        .try_for_each(|(p, &u)| predict_one(p, model, cfg.ukf, u))
}

fn update_one(p: &mut Particle, obs: &LatentFrame, gain: GainForm) -> Result<()> {
    let l = p.latent_dim();
    let n = 2 * l;
    let mut s = p.cov.block(0, 0, l, l);
    for (i, v) in obs.sigma2.iter().enumerate() {
        s[(i, i)] += v;
    }
    s.symmetrize();
    // rows of K^T = S^-1 * (rows 0..L of the left factor)
    let left = match gain {
        GainForm::CrossCovariance => p.cov.block(0, 0, l, n),
        GainForm::Literal => {
            let mut m = Matrix::zeros(l, n);
            m.set_block(0, 0, &p.cov.block(0, 0, l, l));
            m.set_block(0, l, &Matrix::identity(l));
            m
        }
    };
    let k = s.solve_spd(&left)?.transpose();
    let resid: Vec<f64> = obs.mu.iter().zip(&p.mean).map(|(o, m)| o - m).collect();
    let shift = k.matvec(&resid)?;
    for (m, d) in p.mean.iter_mut().zip(shift) {
        *m += d;
    }
    let ksk = k.matmul(&s)?.matmul(&k.transpose())?;
    p.cov = p.cov.sub(&ksk)?;
    p.cov.symmetrize();
    p.updated = p.mean.clone();
    Ok(())
}

/// Corrects every particle with the observed latent Gaussian.
pub fn update_step(particles: &mut [Particle], obs: &LatentFrame, cfg: &AmjpfConfig) -> Result<()> {
    if let Some(p) = particles.first() {
        if obs.dim() != p.latent_dim() {
            return Err(Error::invalid(format!(
                "observation has dimension {}, filter expects {}",
                obs.dim(),
                p.latent_dim()
            )));
        }
    }
    particles
        .par_iter_mut()
        .try_for_each(|p| update_one(p, obs, cfg.gain))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScore {
    pub y: f64,
    pub winner: usize,
    /// Resampling weights were unusable and reset to uniform.
    pub weights_reset: bool,
}

/// Per-particle innovation scores.
pub fn innovations(particles: &[Particle]) -> Vec<f64> {
    particles.iter().map(Particle::innovation).collect()
}

/// Scores the frame, then resamples systematically with weights
/// proportional to `exp(-y_p / tau)`.
pub fn anomaly_and_resample(
    particles: &mut Vec<Particle>,
    cfg: &AmjpfConfig,
    rng: &mut impl Rng,
) -> Result<FrameScore> {
    if particles.is_empty() {
        return Err(Error::invalid("empty particle set"));
    }
    let ys = innovations(particles);
    let mut best = 0;
    for (i, y) in ys.iter().enumerate() {
        if !y.is_finite() {
            return Err(Error::numeric(format!("particle {i} has a non-finite innovation")));
        }
        if *y < ys[best] {
            best = i;
        }
    }
    let y_min = ys[best];
    let winner = particles[best].label;

    // shifting by the minimum keeps the best weight at exp(0)
    let mut weights: Vec<f64> = ys.iter().map(|y| (-(y - y_min) / cfg.tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let weights_reset = !(total.is_finite() && total > 0.0);
    let n = particles.len();
    if weights_reset {
        weights.iter_mut().for_each(|w| *w = 1.0 / n as f64);
    } else {
        weights.iter_mut().for_each(|w| *w /= total);
    }
    for (p, w) in particles.iter_mut().zip(&weights) {
        p.weight = *w;
    }

    let picks = systematic_resample(&weights, rng.random());
    let uniform = 1.0 / n as f64;
    *particles = picks
        .into_iter()
        .map(|i| Particle {
            weight: uniform,
            ..particles[i].clone()
        })
        .collect();
    Ok(FrameScore {
        y: y_min,
        winner,
        weights_reset,
    })
}

/// Indices chosen by systematic resampling with offset `u` in `[0, 1)`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights.first().copied().unwrap_or(0.0);
    let mut j = 0;
    for i in 0..n {
        let pos = (u + i as f64) / n as f64;
        while pos >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Mean plus three population standard deviations.
pub fn calibrate_threshold(y: &[f64]) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::invalid(format!(
            "threshold needs at least 2 values, got {}",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("training signal contains non-finite values"));
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(mean + 3.0 * var.sqrt())
}

/// Clears runs of `true` shorter than `window`.
pub fn window_filter(flags: &[bool], window: usize) -> Vec<bool> {
    let mut out = flags.to_vec();
    let mut i = 0;
    while i < flags.len() {
        if !flags[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < flags.len() && flags[i] {
            i += 1;
        }
        if i - start < window {
            out[start..i].iter_mut().for_each(|f| *f = false);
        }
    }
    out
}

/// Raw filter output over a latent sequence. Entry `i` belongs to frame `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub y: Vec<f64>,
    pub winners: Vec<usize>,
    /// Frames whose resampling weights were reset to uniform.
    pub weight_resets: Vec<usize>,
}

pub fn run_filter(model: &RegimeModel, latents: &[LatentFrame], cfg: &AmjpfConfig) -> Result<FilterTrace> {
    if latents.len() < 2 {
        return Err(Error::invalid(format!(
            "scoring needs at least 2 frames, got {}",
            latents.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut particles = init_filter(model, cfg, &latents[0], &mut rng).map_err(|e| e.at_frame(0))?;
    let mut trace = FilterTrace {
        y: Vec::with_capacity(latents.len() - 1),
        winners: Vec::with_capacity(latents.len() - 1),
        weight_resets: Vec::new(),
    };
    for (k, obs) in latents.iter().enumerate().skip(1) {
        let score = (|| {
            predict_step(&mut particles, model, cfg, &mut rng)?;
            update_step(&mut particles, obs, cfg)?;
            anomaly_and_resample(&mut particles, cfg, &mut rng)
        })()
        .map_err(|e| e.at_frame(k))?;
        trace.y.push(score.y);
        trace.winners.push(score.winner);
        if score.weights_reset {
            trace.weight_resets.push(k);
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    /// Frame index of each row.
    pub frames: Vec<usize>,
    pub y: Vec<f64>,
    pub threshold: f64,
    pub window: usize,
    pub raw_flags: Vec<bool>,
    pub flags: Vec<bool>,
    pub winners: Vec<usize>,
    pub weight_resets: Vec<usize>,
}

impl AnomalyReport {
    pub fn from_trace(trace: FilterTrace, threshold: f64, window: usize) -> Self {
        let raw_flags: Vec<bool> = trace.y.iter().map(|&y| y > threshold).collect();
        let flags = window_filter(&raw_flags, window);
        Self {
            frames: (1..=trace.y.len()).collect(),
            y: trace.y,
            threshold,
            window,
            raw_flags,
            flags,
            winners: trace.winners,
            weight_resets: trace.weight_resets,
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.flags.is_empty() {
            return 0.0;
        }
        self.flags.iter().filter(|&&f| f).count() as f64 / self.flags.len() as f64
    }
}

pub fn score_sequence(
    model: &RegimeModel,
    latents: &[LatentFrame],
    cfg: &AmjpfConfig,
    threshold: f64,
) -> Result<AnomalyReport> {
    let trace = run_filter(model, latents, cfg)?;
    Ok(AnomalyReport::from_trace(trace, threshold, cfg.window))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::FeatureScaling;
    use crate::mlp::{Activation, Layer, MlpParams};
    use proptest::prelude::*;

    fn single_cluster(l: usize, vel_var: &[f64]) -> ClusterModel {
        let mut cov = Matrix::identity(2 * l);
        for (i, v) in vel_var.iter().enumerate() {
            cov[(l + i, l + i)] = *v;
        }
        ClusterModel {
            centroids: vec![vec![0.0; 2 * l]],
            covariances: vec![cov],
            radii: vec![1.0],
            counts: vec![10],
            scaling: FeatureScaling {
                offset: vec![0.0; 2 * l],
                scale: vec![1.0; 2 * l],
            },
        }
    }

    fn fallback_model(l: usize, vel_var: &[f64]) -> RegimeModel {
        RegimeModel {
            clusters: single_cluster(l, vel_var),
            transitions: TransitionMatrix {
                probs: Matrix::identity(1),
                smoothing: 0.0,
            },
            dynamics: vec![DynamicsNet::constant_velocity(0, vel_var).unwrap()],
        }
    }

    fn linear_net(g: &Matrix, bias: Vec<f64>) -> MlpParams {
        MlpParams::from_layers(
            vec![Layer {
                weights: g.clone(),
                bias,
            }],
            Activation::Identity,
        )
        .unwrap()
    }

    fn net_model(l: usize, net: MlpParams, noise: &[f64]) -> RegimeModel {
        let mut m = fallback_model(l, &vec![1.0; l]);
        m.dynamics[0] = DynamicsNet {
            cluster: 0,
            net,
            noise: Matrix::from_diag(noise),
            fallback: false,
        };
        m
    }

    fn one_particle(mean: Vec<f64>, cov: Matrix) -> Particle {
        Particle {
            label: 0,
            predicted: mean.clone(),
            updated: mean.clone(),
            mean,
            cov,
            weight: 1.0,
        }
    }

    fn random_spd(rng: &mut impl Rng, n: usize) -> Matrix {
        let a = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut m = a.matmul(&a.transpose()).unwrap();
        m.add_diag(0.1);
        m
    }

    fn cfg1() -> AmjpfConfig {
        AmjpfConfig {
            particles: 1,
            ..AmjpfConfig::default()
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1.0)
    }

    #[test]
    fn init_single_particle() {
        let m = fallback_model(2, &[0.5, 0.25]);
        let first = LatentFrame::new(vec![1.0, -1.0], vec![0.1, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ps = init_filter(&m, &cfg1(), &first, &mut rng).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].weight, 1.0);
        assert_eq!(ps[0].mean, vec![1.0, -1.0, 0.0, 0.0]);
        assert_eq!(ps[0].cov.diag(), vec![0.1, 0.2, 0.5, 0.25]);
        assert_eq!(ps[0].cov.block(0, 2, 2, 2), Matrix::zeros(2, 2));
    }

    #[test]
    fn init_labels_follow_priors() {
        let c = 4;
        let mut m = fallback_model(1, &[1.0]);
        m.clusters.centroids = vec![vec![0.0; 2]; c];
        m.clusters.covariances = vec![Matrix::identity(2); c];
        m.clusters.radii = vec![1.0; c];
        m.clusters.counts = vec![7; c];
        m.transitions.probs = Matrix::from_vec(c, c, vec![0.25; c * c]).unwrap();
        m.dynamics = (0..c).map(|s| DynamicsNet::constant_velocity(s, &[1.0]).unwrap()).collect();
        let n = 10_000;
        let cfg = AmjpfConfig {
            particles: n,
            ..AmjpfConfig::default()
        };
        let first = LatentFrame::new(vec![0.0], vec![1.0]).unwrap();
        let ps = init_filter(&m, &cfg, &first, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let mut hist = vec![0usize; c];
        for p in &ps {
            hist[p.label] += 1;
        }
        let expect = n as f64 / c as f64;
        let sd = (n as f64 * 0.25 * 0.75).sqrt();
        for h in hist {
            assert!((h as f64 - expect).abs() < 4.0 * sd, "{h}");
        }
    }

    #[test]
    fn zero_net_keeps_position_and_stops() {
        let l = 3;
        let m = net_model(l, MlpParams::zeros(&[l, 6, l], Activation::Tanh).unwrap(), &[1e-9; 3]);
        let mut ps = vec![one_particle(vec![0.5, -0.2, 1.0, 0.3, 0.3, 0.3], Matrix::zeros(6, 6))];
        predict_step(&mut ps, &m, &cfg1(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for i in 0..l {
            assert!((ps[0].mean[i] - [0.5, -0.2, 1.0][i]).abs() < 1e-12);
            assert!(ps[0].mean[l + i].abs() < 1e-12);
        }
    }

    #[test]
    fn linear_net_deterministic_propagation() {
        let g = Matrix::from_rows(&[vec![0.5, 0.1], vec![-0.2, 0.3]]).unwrap();
        let m = net_model(2, linear_net(&g, vec![0.0; 2]), &[1e-9; 2]);
        let mu = [1.0, 2.0];
        let mut ps = vec![one_particle(vec![1.0, 2.0, 9.0, 9.0], Matrix::zeros(4, 4))];
        predict_step(&mut ps, &m, &cfg1(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let gm = g.matvec(&mu).unwrap();
        let want = [mu[0] + gm[0], mu[1] + gm[1], gm[0], gm[1]];
        for (a, b) in ps[0].mean.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(ps[0].predicted, ps[0].mean);
    }

    #[test]
    fn affine_prediction_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let l = 3;
        for _ in 0..10 {
            let g = Matrix::from_vec(l, l, (0..l * l).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let b: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let noise: Vec<f64> = (0..l).map(|_| rng.random_range(0.01..0.5)).collect();
            let m = net_model(l, linear_net(&g, b.clone()), &noise);
            let mean: Vec<f64> = (0..2 * l).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p0 = random_spd(&mut rng, 2 * l);
            let mut ps = vec![one_particle(mean.clone(), p0.clone())];
            predict_step(&mut ps, &m, &cfg1(), &mut rng).unwrap();

            // z' = F z + c with F = [[I + G, 0], [G, 0]]
            let mut f = Matrix::zeros(2 * l, 2 * l);
            let mut ig = g.clone();
            ig.add_diag(1.0);
            f.set_block(0, 0, &ig);
            f.set_block(l, 0, &g);
            let mut c = b.clone();
            c.extend_from_slice(&b);
            let want_mean: Vec<f64> = f.matvec(&mean).unwrap().iter().zip(&c).map(|(a, b)| a + b).collect();
            let q = Matrix::from_diag(&noise);
            let want_cov = f
                .matmul(&p0)
                .unwrap()
                .matmul(&f.transpose())
                .unwrap()
                .add(&Matrix::block_diag(&q, &q))
                .unwrap();
            for (a, b) in ps[0].mean.iter().zip(&want_mean) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!(ps[0].cov.sub(&want_cov).unwrap().max_abs() < 1e-8);
        }
    }

    fn assert_close(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn half_gain_with_unit_covariances() {
        let l = 2;
        let obs = LatentFrame::new(vec![2.0, -2.0], vec![1.0, 1.0]).unwrap();

        // literal gain: [I; I] / 2
        let mut ps = vec![one_particle(vec![0.0; 4], Matrix::identity(4))];
        let cfg = AmjpfConfig {
            gain: GainForm::Literal,
            ..cfg1()
        };
        update_step(&mut ps, &obs, &cfg).unwrap();
        assert_close(&ps[0].mean, &[1.0, -1.0, 1.0, -1.0]);

        // cross-covariance gain agrees once the velocity is fully correlated
        let mut p = Matrix::identity(4);
        p.set_block(0, l, &Matrix::identity(l));
        p.set_block(l, 0, &Matrix::identity(l));
        p.set_block(l, l, &Matrix::from_diag(&[2.0, 2.0]));
        let mut ps = vec![one_particle(vec![0.0; 4], p)];
        update_step(&mut ps, &obs, &cfg1()).unwrap();
        assert_close(&ps[0].mean, &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(ps[0].updated, ps[0].mean);
    }

    #[test]
    fn huge_observation_noise_is_ignored() {
        let obs = LatentFrame::new(vec![5.0, 5.0], vec![crate::vae::SIGMA2_MAX; 2]).unwrap();
        let mut ps = vec![one_particle(vec![0.0, 0.0, 0.1, 0.1], Matrix::identity(4))];
        update_step(&mut ps, &obs, &cfg1()).unwrap();
        for (a, b) in ps[0].mean.iter().zip([0.0, 0.0, 0.1, 0.1]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    fn kalman_oracle(l: usize, vel_var: &[f64], latents: &[LatentFrame]) -> Vec<(Vec<f64>, Matrix)> {
        let n = 2 * l;
        let mut f = Matrix::identity(n);
        f.set_block(0, l, &Matrix::identity(l));
        let mut h = Matrix::zeros(l, n);
        h.set_block(0, 0, &Matrix::identity(l));
        let w = Matrix::from_diag(vel_var);
        let q = Matrix::block_diag(&w, &w);
        let mut x = latents[0].mu.clone();
        x.resize(n, 0.0);
        let mut p = Matrix::block_diag(&Matrix::from_diag(&latents[0].sigma2), &w);
        let mut out = Vec::new();
        for obs in &latents[1..] {
            x = f.matvec(&x).unwrap();
            p = f.matmul(&p).unwrap().matmul(&f.transpose()).unwrap().add(&q).unwrap();
            let s = h
                .matmul(&p)
                .unwrap()
                .matmul(&h.transpose())
                .unwrap()
                .add(&Matrix::from_diag(&obs.sigma2))
                .unwrap();
            let pht = p.matmul(&h.transpose()).unwrap();
            let k = s.solve_spd(&pht.transpose()).unwrap().transpose();
            let hx = h.matvec(&x).unwrap();
            let r: Vec<f64> = obs.mu.iter().zip(&hx).map(|(a, b)| a - b).collect();
            for (xi, d) in x.iter_mut().zip(k.matvec(&r).unwrap()) {
                *xi += d;
            }
            p = p.sub(&k.matmul(&s).unwrap().matmul(&k.transpose()).unwrap()).unwrap();
            p.symmetrize();
            out.push((x.clone(), p.clone()));
        }
        out
    }

    #[test]
    fn degenerate_filter_is_a_kalman_filter() {
        let l = 3;
        let vel_var = [0.02, 0.05, 0.01];
        let m = fallback_model(l, &vel_var);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let latents: Vec<LatentFrame> = (0..101)
            .map(|k| {
                let t = k as f64 * 0.1;
                let mu = vec![t.sin(), t.cos(), 0.3 * t + rng.random_range(-0.05..0.05)];
                let s2 = (0..l).map(|_| rng.random_range(0.01..0.2)).collect();
                LatentFrame::new(mu, s2).unwrap()
            })
            .collect();
        let want = kalman_oracle(l, &vel_var, &latents);
        let cfg = cfg1();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = init_filter(&m, &cfg, &latents[0], &mut rng).unwrap();
        for (obs, (x, p)) in latents[1..].iter().zip(&want) {
            predict_step(&mut ps, &m, &cfg, &mut rng).unwrap();
            update_step(&mut ps, obs, &cfg).unwrap();
            for (a, b) in ps[0].mean.iter().zip(x) {
                assert!(rel_err(*a, *b) < 1e-6);
            }
            for (a, b) in ps[0].cov.as_slice().iter().zip(p.as_slice()) {
                assert!(rel_err(*a, *b) < 1e-6);
            }
            anomaly_and_resample(&mut ps, &cfg, &mut rng).unwrap();
        }
    }

    #[test]
    fn innovation_by_hand() {
        let mut p = one_particle(vec![0.0; 4], Matrix::identity(4));
        p.predicted = vec![1.0, 1.0, 0.0, 0.0];
        p.updated = vec![1.2, 0.6, 5.0, 5.0];
        let mut ps = vec![p];
        let s = anomaly_and_resample(&mut ps, &cfg1(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((s.y - 0.3).abs() < 1e-12);
        assert_eq!(s.winner, 0);

        let mut still = vec![one_particle(vec![0.0; 4], Matrix::identity(4))];
        let s = anomaly_and_resample(&mut still, &cfg1(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.y, 0.0);
    }

    #[test]
    fn minimum_over_particles_and_resampled_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = 3;
        for trial in 0..20 {
            let n = 1 + trial * 3;
            let mut ps: Vec<Particle> = (0..n)
                .map(|i| {
                    let mut p = one_particle(vec![0.0; 2 * l], Matrix::identity(2 * l));
                    p.label = i % 4;
                    p.weight = 1.0 / n as f64;
                    p.predicted = (0..2 * l).map(|_| rng.random_range(-1.0..1.0)).collect();
                    p.updated = (0..2 * l).map(|_| rng.random_range(-1.0..1.0)).collect();
                    p
                })
                .collect();
            let mut best = (f64::INFINITY, 0);
            for p in &ps {
                let s: f64 = (0..l).map(|i| (p.updated[i] - p.predicted[i]).abs()).sum::<f64>() / l as f64;
                if s < best.0 {
                    best = (s, p.label);
                }
            }
            let cfg = AmjpfConfig {
                particles: n,
                tau: 0.05,
                ..AmjpfConfig::default()
            };
            let s = anomaly_and_resample(&mut ps, &cfg, &mut rng).unwrap();
            assert_eq!(s.y, best.0);
            assert_eq!(s.winner, best.1);
            assert!(!s.weights_reset);
            assert_eq!(ps.len(), n);
            let total: f64 = ps.iter().map(|p| p.weight).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        let mut ps: Vec<Particle> = (0..3)
            .map(|i| {
                let mut p = one_particle(vec![0.0; 2], Matrix::identity(2));
                p.label = 2 - i;
                p
            })
            .collect();
        let cfg = AmjpfConfig {
            particles: 3,
            ..AmjpfConfig::default()
        };
        let s = anomaly_and_resample(&mut ps, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.winner, 2);
    }

    #[test]
    fn systematic_resampling_counts() {
        assert_eq!(systematic_resample(&[0.5, 0.5], 0.2), vec![0, 1]);
        assert_eq!(systematic_resample(&[1.0, 0.0, 0.0], 0.99), vec![0, 0, 0]);
        assert_eq!(systematic_resample(&[0.0, 0.0, 1.0], 0.0), vec![2, 2, 2]);
        let w = [0.1, 0.6, 0.3];
        let picks = systematic_resample(&w, 0.5);
        for (j, wj) in w.iter().enumerate() {
            let count = picks.iter().filter(|&&p| p == j).count() as f64;
            assert!((count - wj * 3.0).abs() <= 1.0);
        }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(calibrate_threshold(&[0.0, 2.0]).unwrap(), 4.0);
        assert_eq!(calibrate_threshold(&[0.7; 5]).unwrap(), 0.7);
        assert!(calibrate_threshold(&[]).is_err());
        assert!(calibrate_threshold(&[1.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y: Vec<f64> = (0..500).map(|_| rng.random_range(0.0..3.0)).collect();
        let mean = y.iter().sum::<f64>() / 500.0;
        let ss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        let want = mean + 3.0 * (ss / 500.0).sqrt();
        assert!((calibrate_threshold(&y).unwrap() - want).abs() < 1e-12);
    }

    fn rle_filter(flags: &[bool], window: usize) -> Vec<bool> {
        let mut runs: Vec<(bool, usize)> = Vec::new();
        for &f in flags {
            match runs.last_mut() {
                Some((v, n)) if *v == f => *n += 1,
                _ => runs.push((f, 1)),
            }
        }
        runs.into_iter()
            .flat_map(|(v, n)| std::iter::repeat_n(v && n >= window, n))
            .collect()
    }

    #[test]
    fn window_examples() {
        let (t, f) = (true, false);
        assert_eq!(window_filter(&[t, t, f, f], 3), vec![f; 4]);
        assert_eq!(window_filter(&[t, t, t, f], 3), vec![t, t, t, f]);
        assert_eq!(window_filter(&[t, f, t], 1), vec![t, f, t]);
        assert!(window_filter(&[], 3).is_empty());
    }

    proptest! {
        #[test]
        fn window_matches_rle(flags in prop::collection::vec(any::<bool>(), 0..200), window in 1usize..6) {
            let out = window_filter(&flags, window);
            prop_assert_eq!(&out, &rle_filter(&flags, window));
            for (o, i) in out.iter().zip(&flags) {
                prop_assert!(!o || *i);
            }
        }
    }

    fn two_regime_model(rng: &mut impl Rng, l: usize) -> RegimeModel {
        let mut m = fallback_model(l, &vec![0.01; l]);
        m.clusters.centroids = vec![vec![0.0; 2 * l]; 2];
        m.clusters.covariances = vec![Matrix::identity(2 * l); 2];
        m.clusters.radii = vec![1.0; 2];
        m.clusters.counts = vec![3, 5];
        m.transitions.probs = Matrix::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap();
        m.dynamics = (0..2)
            .map(|s| DynamicsNet {
                cluster: s,
                net: MlpParams::random(&[l, 4 * l, l], Activation::Tanh, rng).unwrap(),
                noise: Matrix::from_diag(&vec![1e-3 * (s + 1) as f64; l]),
                fallback: false,
            })
            .collect();
        m
    }

    fn wandering_latents(rng: &mut impl Rng, l: usize, n: usize) -> Vec<LatentFrame> {
        (0..n)
            .map(|k| {
                let t = k as f64 * 0.2;
                let mu = (0..l)
                    .map(|i| (t + i as f64).sin() + rng.random_range(-0.1..0.1))
                    .collect();
                let s2 = (0..l).map(|_| rng.random_range(0.01..0.1)).collect();
                LatentFrame::new(mu, s2).unwrap()
            })
            .collect()
    }

    #[test]
    fn covariances_stay_psd_for_long_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let l = 3;
        let m = two_regime_model(&mut rng, l);
        let latents = wandering_latents(&mut rng, l, 1001);
        let cfg = AmjpfConfig {
            particles: 8,
            tau: 0.05,
            ..AmjpfConfig::default()
        };
        let mut prng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = init_filter(&m, &cfg, &latents[0], &mut prng).unwrap();
        for obs in &latents[1..] {
            predict_step(&mut ps, &m, &cfg, &mut prng).unwrap();
            update_step(&mut ps, obs, &cfg).unwrap();
            for p in &ps {
                assert!(p.cov.min_eigenvalue_symmetric() >= -1e-8);
            }
            let s = anomaly_and_resample(&mut ps, &cfg, &mut prng).unwrap();
            assert!(s.y >= 0.0);
            let total: f64 = ps.iter().map(|p| p.weight).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn scoring_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let l = 2;
        let m = two_regime_model(&mut rng, l);
        let latents = wandering_latents(&mut rng, l, 60);
        let cfg = AmjpfConfig {
            particles: 20,
            tau: 0.1,
            seed: 7,
            ..AmjpfConfig::default()
        };
        let a = score_sequence(&m, &latents, &cfg, 0.05).unwrap();
        let b = score_sequence(&m, &latents, &cfg, 0.05).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 59);
        assert_eq!(a.frames[0], 1);
        for ((f, r), y) in a.flags.iter().zip(&a.raw_flags).zip(&a.y) {
            assert!(!f || (*r && *y > a.threshold));
        }
        assert!(score_sequence(&m, &latents[..1], &cfg, 0.05).is_err());
    }

    #[test]
    fn errors_carry_the_frame_index() {
        let m = fallback_model(2, &[0.1, 0.1]);
        let mut latents = vec![LatentFrame::new(vec![0.0, 0.0], vec![0.1, 0.1]).unwrap(); 4];
        latents[2] = LatentFrame::new(vec![0.0, 0.0, 0.0], vec![0.1; 3]).unwrap();
        let err = run_filter(&m, &latents, &cfg1()).unwrap_err();
        assert!(matches!(err, Error::AtFrame { frame: 2, .. }), "{err}");
    }

    #[test]
    fn bad_configs_are_rejected() {
        let m = fallback_model(1, &[0.1]);
        let first = LatentFrame::new(vec![0.0], vec![0.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cfg in [
            AmjpfConfig { particles: 0, ..cfg1() },
            AmjpfConfig { window: 0, ..cfg1() },
            AmjpfConfig { tau: 0.0, ..cfg1() },
            AmjpfConfig { tau: f64::NAN, ..cfg1() },
        ] {
            assert!(init_filter(&m, &cfg, &first, &mut rng).is_err());
        }
        let mut broken = m.clone();
        broken.dynamics.clear();
        assert!(init_filter(&broken, &cfg1(), &first, &mut rng).is_err());
    }
}
