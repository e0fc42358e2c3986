//! Regime discovery: k-means over standardized generalized states, per-cluster
//! statistics, and the cluster-to-cluster transition matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gs::GeneralizedState;
use crate::linalg::Matrix;

pub const MAX_LLOYD_ITERATIONS: usize = 300;
const COVARIANCE_JITTER: f64 = 1e-9;

/// Per-dimension affine standardization `(x − offset) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaling {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FeatureScaling {
    /// Zero mean, unit (population) variance over `data`; constant dimensions
    /// keep scale 1.
    pub fn fit(data: &[Vec<f64>]) -> Self {
        let d = data[0].len();
        let n = data.len() as f64;
        let mut offset = vec![0.0; d];
        for x in data {
            for (o, v) in offset.iter_mut().zip(x) {
                *o += v;
            }
        }
        offset.iter_mut().for_each(|o| *o /= n);
        let mut var = vec![0.0; d];
        for x in data {
            for ((s, v), o) in var.iter_mut().zip(x).zip(&offset) {
                *s += (v - o) * (v - o);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { offset, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.offset)
            .zip(&self.scale)
            .map(|((v, o), s)| (v - o) / s)
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    /// Centroids in standardized space.
    pub centroids: Vec<Vec<f64>>,
    /// Member covariances in standardized space.
    pub covariances: Vec<Matrix>,
    pub radii: Vec<f64>,
    pub counts: Vec<usize>,
    pub scaling: FeatureScaling,
}

impl ClusterModel {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    /// Dimension of the generalized state (`2L`).
    pub fn state_dim(&self) -> usize {
        self.scaling.dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.state_dim() / 2
    }

    /// Empirical membership frequencies.
    pub fn priors(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        self.counts
            .iter()
            .map(|&c| c as f64 / total.max(1) as f64)
            .collect()
    }

    /// Covariance of cluster `s` mapped back to latent units.
    pub fn covariance_unscaled(&self, s: usize) -> Matrix {
        let q = &self.covariances[s];
        let sc = &self.scaling.scale;
        let mut out = q.clone();
        for r in 0..q.rows() {
            for c in 0..q.cols() {
                out[(r, c)] = q[(r, c)] * sc[r] * sc[c];
            }
        }
        out
    }

    /// Velocity block of [`Self::covariance_unscaled`].
    pub fn velocity_covariance(&self, s: usize) -> Matrix {
        let l = self.latent_dim();
        self.covariance_unscaled(s).block(l, l, l, l)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.centroids.len();
        let d = self.scaling.dim();
        if c == 0 {
            return Err(Error::invalid("cluster model has no clusters"));
        }
        if d == 0 || !d.is_multiple_of(2) || self.scaling.offset.len() != d {
            return Err(Error::invalid("cluster scaling must cover an even state dimension"));
        }
        if self.covariances.len() != c || self.radii.len() != c || self.counts.len() != c {
            return Err(Error::invalid("cluster statistics disagree on the cluster count"));
        }
        if self.centroids.iter().any(|m| m.len() != d)
            || self.covariances.iter().any(|q| q.shape() != (d, d))
        {
            return Err(Error::invalid("cluster statistics disagree on the state dimension"));
        }
        if self.radii.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::invalid("cluster radii must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub model: ClusterModel,
    pub labels: Vec<usize>,
    /// Sum of squared standardized distances after each assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations in standardized space.
pub fn kmeans_fit(gs: &[GeneralizedState], clusters: usize, seed: u64) -> Result<KmeansFit> {
    if clusters == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if gs.len() < clusters {
        return Err(Error::invalid(format!(
            "{} generalized states cannot fill {clusters} clusters",
            gs.len()
        )));
    }
    let raw: Vec<Vec<f64>> = gs.iter().map(GeneralizedState::stacked).collect();
    let dim = raw[0].len();
    if raw.iter().any(|x| x.len() != dim) {
        return Err(Error::invalid("generalized states differ in dimension"));
    }
    let scaling = FeatureScaling::fit(&raw);
    let data: Vec<Vec<f64>> = raw.iter().map(|x| scaling.apply(x)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centroids = kmeans_pp(&data, clusters, &mut rng);
    let mut labels = vec![usize::MAX; data.len()];
    let mut objective = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        let mut total = 0.0;
        for (x, label) in data.iter().zip(labels.iter_mut()) {
            let (j, d) = nearest(&centroids, x);
            total += d;
            if *label != j {
                *label = j;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            break;
        }
        update_centroids(&data, &labels, &mut centroids);
    }

    let model = summarize(&data, &labels, centroids, scaling);
    Ok(KmeansFit {
        model,
        labels,
        objective,
    })
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..data.len())];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &data[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut idx = d2.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // all points coincide with a chosen centroid
            (0..data.len()).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(pick);
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, &data[pick]));
        }
    }
    chosen.into_iter().map(|i| data[i].clone()).collect()
}

fn update_centroids(data: &[Vec<f64>], labels: &[usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    let dim = data[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &l) in data.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(x) {
            *s += v;
        }
    }
    let mut empty = Vec::new();
    for j in 0..k {
        if counts[j] == 0 {
            empty.push(j);
        } else {
            centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        }
    }
    // Re-seed each empty cluster at the point farthest from its centroid,
    // lowest index on ties.
    for j in empty {
        let mut best = (0, -1.0);
        for (i, x) in data.iter().enumerate() {
            let d = sq_dist(x, &centroids[labels[i]]);
            if d > best.1 {
                best = (i, d);
            }
        }
        centroids[j] = data[best.0].clone();
    }
}

fn summarize(
    data: &[Vec<f64>],
    labels: &[usize],
    centroids: Vec<Vec<f64>>,
    scaling: FeatureScaling,
) -> ClusterModel {
    let k = centroids.len();
    let dim = data[0].len();
    let mut counts = vec![0usize; k];
    let mut radii = vec![0.0f64; k];
    let mut covariances = vec![Matrix::zeros(dim, dim); k];
    for (x, &l) in data.iter().zip(labels) {
        counts[l] += 1;
        radii[l] = radii[l].max(sq_dist(x, &centroids[l]).sqrt());
    }
    let mut means = vec![vec![0.0; dim]; k];
    for (x, &l) in data.iter().zip(labels) {
        for (m, v) in means[l].iter_mut().zip(x) {
            *m += v / counts[l] as f64;
        }
    }
    for (x, &l) in data.iter().zip(labels) {
        let dev: Vec<f64> = x.iter().zip(&means[l]).map(|(a, b)| a - b).collect();
        let q = &mut covariances[l];
        for r in 0..dim {
            for c in 0..dim {
                q[(r, c)] += dev[r] * dev[c] / counts[l] as f64;
            }
        }
    }
    for q in &mut covariances {
        q.symmetrize();
        q.add_diag(COVARIANCE_JITTER);
    }
    ClusterModel {
        centroids,
        covariances,
        radii,
        counts,
        scaling,
    }
}

/// Nearest centroid in standardized space and its Euclidean distance; ties go
/// to the lowest index.
pub fn assign_cluster(m: &ClusterModel, gs: &GeneralizedState) -> (usize, f64) {
    let x = m.scaling.apply(&gs.stacked());
    let (j, d2) = nearest(&m.centroids, &x);
    (j, d2.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub probs: Matrix,
    pub smoothing: f64,
}

impl TransitionMatrix {
    pub fn num_clusters(&self) -> usize {
        self.probs.rows()
    }

    pub fn row(&self, from: usize) -> &[f64] {
        self.probs.row(from)
    }

    /// Inverse-CDF draw from row `from` given a uniform `u` in `[0, 1)`.
    pub fn sample(&self, from: usize, u: f64) -> usize {
        let row = self.row(from);
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // rounding left u above the cumulative sum: last positive entry
        row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.probs.rows();
        if !self.probs.is_square() || c == 0 {
            return Err(Error::invalid("transition matrix must be square and non-empty"));
        }
        for r in 0..c {
            let row = self.probs.row(r);
            if row.iter().any(|p| !(*p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("transition row {r} is not a distribution")));
            }
        }
        Ok(())
    }
}

/// Smoothed bigram frequencies of a label stream.
pub fn estimate_transitions(labels: &[usize], clusters: usize, smoothing: f64) -> Result<TransitionMatrix> {
    if labels.len() < 2 {
        return Err(Error::invalid("need at least two labels to count transitions"));
    }
    if clusters == 0 {
        return Err(Error::invalid("cluster count must be at least 1"));
    }
    if !(smoothing >= 0.0) {
        return Err(Error::invalid("smoothing must be non-negative"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= clusters) {
        return Err(Error::invalid(format!("label {bad} out of range for {clusters} clusters")));
    }
    let mut counts = vec![vec![0usize; clusters]; clusters];
    for w in labels.windows(2) {
        counts[w[0]][w[1]] += 1;
    }
    let mut probs = Matrix::zeros(clusters, clusters);
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        let denom = total as f64 + clusters as f64 * smoothing;
        let out = probs.row_mut(i);
        if denom > 0.0 {
            for (o, &c) in out.iter_mut().zip(row) {
                *o = (c as f64 + smoothing) / denom;
            }
        } else {
            out.iter_mut().for_each(|o| *o = 1.0 / clusters as f64);
        }
    }
    Ok(TransitionMatrix { probs, smoothing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gs(v: &[f64]) -> GeneralizedState {
        GeneralizedState::from_stacked(v).unwrap()
    }

    fn blobs(rng: &mut impl Rng, centers: &[[f64; 2]], per: usize, spread: f64) -> (Vec<GeneralizedState>, Vec<usize>) {
        let mut out = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..per {
            for (k, c) in centers.iter().enumerate() {
                out.push(gs(&[
                    c[0] + rng.random_range(-spread..spread),
                    c[1] + rng.random_range(-spread..spread),
                ]));
                truth.push(k);
            }
        }
        (out, truth)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let data = vec![gs(&[0.0, 1.0]), gs(&[2.0, 3.0]), gs(&[4.0, -1.0])];
        let fit = kmeans_fit(&data, 1, 0).unwrap();
        assert!(fit.labels.iter().all(|&l| l == 0));
        // standardized data has zero mean
        assert!(fit.model.centroids[0].iter().all(|c| c.abs() < 1e-12));
        assert_eq!(fit.model.counts, vec![3]);
    }

    #[test]
    fn separated_blobs_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (data, truth) = blobs(&mut rng, &[[0.0, 0.0], [50.0, 50.0]], 30, 1.0);
        let fit = kmeans_fit(&data, 2, 7).unwrap();
        let map = fit.labels[0];
        for (l, t) in fit.labels.iter().zip(&truth) {
            assert_eq!(*l == map, *t == truth[0]);
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let data = vec![gs(&[0.0, 0.0]), gs(&[1.0, 5.0]), gs(&[-3.0, 2.0]), gs(&[4.0, 4.0])];
        let fit = kmeans_fit(&data, 4, 1).unwrap();
        assert!(fit.model.radii.iter().all(|&r| r == 0.0));
        assert_eq!(fit.model.counts, vec![1; 4]);
    }

    #[test]
    fn too_few_points_rejected() {
        let data = vec![gs(&[0.0, 0.0])];
        assert!(kmeans_fit(&data, 2, 0).is_err());
        assert!(kmeans_fit(&data, 0, 0).is_err());
    }

    #[test]
    fn members_within_radius_and_refit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, _) = blobs(&mut rng, &[[0.0, 0.0], [5.0, 1.0], [2.0, 8.0]], 40, 2.0);
        let a = kmeans_fit(&data, 3, 11).unwrap();
        let b = kmeans_fit(&data, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model.counts.iter().sum::<usize>(), data.len());
        for (g, &l) in data.iter().zip(&a.labels) {
            let x = a.model.scaling.apply(&g.stacked());
            let d = sq_dist(&x, &a.model.centroids[l]).sqrt();
            assert!(d <= a.model.radii[l] + 1e-12);
        }
        for q in &a.model.covariances {
            assert!(q.min_eigenvalue_symmetric() > 0.0);
        }
    }

    #[test]
    fn assignment_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (data, _) = blobs(&mut rng, &[[0.0, 0.0], [5.0, 1.0], [2.0, 8.0]], 20, 1.0);
        let fit = kmeans_fit(&data, 3, 2).unwrap();
        let m = &fit.model;
        // a state sitting exactly on a centroid
        for j in 0..3 {
            let raw: Vec<f64> = m.centroids[j]
                .iter()
                .zip(&m.scaling.scale)
                .zip(&m.scaling.offset)
                .map(|((c, s), o)| c * s + o)
                .collect();
            let (l, d) = assign_cluster(m, &gs(&raw));
            assert_eq!(l, j);
            assert!(d < 1e-12);
        }
        // linear-scan oracle
        for _ in 0..50 {
            let g = gs(&[rng.random_range(-2.0..9.0), rng.random_range(-2.0..9.0)]);
            let x = m.scaling.apply(&g.stacked());
            let dists: Vec<f64> = m.centroids.iter().map(|c| sq_dist(c, &x)).collect();
            let best = (0..3).fold(0, |b, j| if dists[j] < dists[b] { j } else { b });
            assert_eq!(assign_cluster(m, &g).0, best);
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let m = ClusterModel {
            centroids: vec![vec![9.0, 9.0], vec![-1.0, 0.0], vec![5.0, 5.0], vec![1.0, 0.0]],
            covariances: vec![Matrix::identity(2); 4],
            radii: vec![0.0; 4],
            counts: vec![1; 4],
            scaling: FeatureScaling {
                offset: vec![0.0, 0.0],
                scale: vec![1.0, 1.0],
            },
        };
        assert_eq!(assign_cluster(&m, &gs(&[0.0, 0.0])), (1, 1.0));
    }

    #[test]
    fn hand_counted_transitions() {
        let t = estimate_transitions(&[0, 0, 0, 1], 2, 0.0).unwrap();
        assert!((t.probs[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.probs[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn repeated_label_is_absorbing() {
        let t = estimate_transitions(&[2, 2, 2, 2], 3, 0.0).unwrap();
        assert_eq!(t.probs[(2, 2)], 1.0);
    }

    #[test]
    fn out_of_range_label_rejected() {
        assert!(estimate_transitions(&[0, 3], 3, 0.0).is_err());
        assert!(estimate_transitions(&[0], 3, 0.0).is_err());
    }

    #[test]
    fn transitions_match_bigram_counter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let eps = 1e-3;
        let t = estimate_transitions(&labels, 4, eps).unwrap();
        for i in 0..4 {
            let from_i: Vec<usize> = (0..labels.len() - 1).filter(|&k| labels[k] == i).collect();
            for j in 0..4 {
                let c = from_i.iter().filter(|&&k| labels[k + 1] == j).count();
                let want = (c as f64 + eps) / (from_i.len() as f64 + 4.0 * eps);
                assert!((t.probs[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sampling_follows_cumulative_row() {
        let t = estimate_transitions(&[0, 0, 0, 1], 2, 0.0).unwrap();
        assert_eq!(t.sample(0, 0.0), 0);
        assert_eq!(t.sample(0, 0.66), 0);
        assert_eq!(t.sample(0, 0.67), 1);
        assert_eq!(t.sample(0, 0.999_999_999_999), 1);
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(labels in proptest::collection::vec(0usize..5, 2..200), eps in 0.0f64..1.0) {
            let t = estimate_transitions(&labels, 5, eps).unwrap();
            for r in 0..5 {
                let s: f64 = t.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(t.row(r).iter().all(|&p| p >= 0.0));
            }
        }

        #[test]
        fn lloyd_objective_never_increases(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<_> = (0..60)
                .map(|_| gs(&(0..4).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<_>>()))
                .collect();
            let fit = kmeans_fit(&data, k, seed).unwrap();
            for w in fit.objective.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
        }
    }
}
