//! Trajectory similarity features and X-means clustering scored with the
//! mixed information criterion (MIC).
//!
//! Every trajectory is encoded by its row of cumulative distances to all
//! other trajectories. X-means grows the number of clusters by trying a
//! 2-means split of every cluster and keeping the split whenever the MIC of
//! the two children is lower than the MIC of the parent.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::rng_for;
use crate::stl::Trajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("trajectory {index} has shape {found:?}, trajectory 0 has {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("weight matrix must be {n}x{n}")]
    BadWeight { n: usize },
    #[error("need at least {k_min} points, got {n}")]
    TooFewPoints { n: usize, k_min: usize },
    #[error("invalid cluster bounds k_min = {k_min}, k_max = {k_max}")]
    BadBounds { k_min: usize, k_max: usize },
}

pub type Result<T> = std::result::Result<T, ClusterError>;

/// How a per-step state difference `e` is measured with weight `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityNorm {
    /// `√(eᵀ M e)`.
    #[default]
    Sqrt,
    /// `eᵀ M e`.
    Quadratic,
}

/// Symmetric matrix of cumulative trajectory distances.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

fn weighted(e: &[f64], m: &[Vec<f64>], norm: SimilarityNorm) -> f64 {
    let mut q = 0.0;
    for (i, row) in m.iter().enumerate() {
        if e[i] == 0.0 {
            continue;
        }
        let me: f64 = row.iter().zip(e).map(|(a, b)| a * b).sum();
        q += e[i] * me;
    }
    match norm {
        SimilarityNorm::Sqrt => q.max(0.0).sqrt(),
        SimilarityNorm::Quadratic => q,
    }
}

/// `D(n, m) = Σ_k ‖x_kⁿ − x_kᵐ‖_M`. Only the upper triangle is computed;
/// the lower one is mirrored so symmetry is exact.
pub fn similarity_matrix(
    trajectories: &[Trajectory],
    m: &[Vec<f64>],
    norm: SimilarityNorm,
) -> Result<SimilarityMatrix> {
    let n = trajectories.len();
    let Some(first) = trajectories.first() else {
        return Ok(SimilarityMatrix { n: 0, data: vec![] });
    };
    let expected = (first.len(), first.n_x());
    for (index, t) in trajectories.iter().enumerate() {
        let found = (t.len(), t.n_x());
        if found != expected {
            return Err(ClusterError::ShapeMismatch {
                index,
                expected,
                found,
            });
        }
    }
    if m.len() != expected.1 || m.iter().any(|r| r.len() != expected.1) {
        return Err(ClusterError::BadWeight { n: expected.1 });
    }
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut e = vec![0.0; expected.1];
            (i + 1..n)
                .map(|j| {
                    let mut total = 0.0;
                    for (a, b) in trajectories[i].states().zip(trajectories[j].states()) {
                        for (d, (x, y)) in e.iter_mut().zip(a.iter().zip(b)) {
                            *d = x - y;
                        }
                        total += weighted(&e, m, norm);
                    }
                    total
                })
                .collect()
        })
        .collect();
    let mut data = vec![0.0; n * n];
    for (i, row) in upper.iter().enumerate() {
        for (off, &v) in row.iter().enumerate() {
            let j = i + 1 + off;
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix { n, data })
}

/// Rows of `D` as feature vectors.
pub fn feature_vectors(d: &SimilarityMatrix) -> Vec<Vec<f64>> {
    (0..d.n).map(|i| d.row(i).to_vec()).collect()
}

/// Features restricted to distances to `count` randomly chosen anchors
/// (all trajectories when `count >= N`). Anchors are returned sorted.
pub fn anchored_features(d: &SimilarityMatrix, count: usize, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>) {
    let anchors: Vec<usize> = if count >= d.n {
        (0..d.n).collect()
    } else {
        let mut a = sample(&mut rng_for(seed, &[0xA4C]), d.n, count).into_vec();
        a.sort_unstable();
        a
    };
    let feats = (0..d.n)
        .map(|i| anchors.iter().map(|&j| d.get(i, j)).collect())
        .collect();
    (anchors, feats)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of(points: &[Vec<f64>], members: impl Iterator<Item = usize>) -> (Vec<f64>, usize) {
    let dim = points.first().map_or(0, Vec::len);
    let mut mu = vec![0.0; dim];
    let mut count = 0;
    for i in members {
        for (m, x) in mu.iter_mut().zip(&points[i]) {
            *m += x;
        }
        count += 1;
    }
    if count > 0 {
        mu.iter_mut().for_each(|m| *m /= count as f64);
    }
    (mu, count)
}

/// Centroids of a labeled partition with `k` clusters.
pub fn centroids(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|c| mean_of(points, labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i)).0)
        .collect()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, mu) in centers.iter().enumerate() {
        let d = sq_dist(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }
    centers
}

/// Lloyd iterations from the given centers. Clusters that lose all members
/// are reseeded at the point farthest from its own centroid.
pub fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let k = centers.len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centers);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        let mut sizes = vec![0usize; k];
        labels.iter().for_each(|&l| sizes[l] += 1);
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let far = (0..points.len())
                .filter(|&i| sizes[labels[i]] > 1)
                .max_by(|&a, &b| {
                    let da = sq_dist(&points[a], &centers[labels[a]]);
                    let db = sq_dist(&points[b], &centers[labels[b]]);
                    da.total_cmp(&db).then(b.cmp(&a))
                });
            if let Some(i) = far {
                sizes[labels[i]] -= 1;
                labels[i] = c;
                sizes[c] = 1;
                changed = true;
            }
        }
        centers = centroids(points, &labels, k);
        if !changed {
            break;
        }
    }
    (labels, centers)
}

/// k-means with k-means++ seeding.
pub fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec<f64>>) {
    let init = kmeans_pp(points, k, rng);
    lloyd(points, init, 100)
}

/// `V_b / (V_b + V_w)`, or 0 when both vanish.
pub fn variance_weight(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let (all, _) = mean_of(points, 0..points.len());
    let mus = centroids(points, labels, k);
    let vw: f64 = points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &mus[l])).sum();
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let vb: f64 = mus
        .iter()
        .zip(&sizes)
        .map(|(mu, &n)| n as f64 * sq_dist(mu, &all))
        .sum();
    if vb + vw == 0.0 {
        0.0
    } else {
        vb / (vb + vw)
    }
}

/// Floor applied to per-cluster variance estimates.
pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Spherical-Gaussian log-likelihood of a partition and its number of free
/// parameters `k(dim + 1) + k − 1`.
pub fn log_likelihood(points: &[Vec<f64>], labels: &[usize], k: usize) -> (f64, usize) {
    let r = points.len() as f64;
    let dim = points.first().map_or(0, Vec::len);
    let mus = centroids(points, labels, k);
    let mut ss = vec![0.0; k];
    let mut sizes = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        ss[l] += sq_dist(p, &mus[l]);
        sizes[l] += 1;
    }
    let mut ll = 0.0;
    for c in 0..k {
        if sizes[c] == 0 {
            continue;
        }
        let np = sizes[c] as f64;
        let var = (ss[c] / (np * dim as f64)).max(VARIANCE_FLOOR);
        ll += np * (np / r).ln()
            - (np * dim as f64 / 2.0) * (2.0 * std::f64::consts::PI * var).ln()
            - ss[c] / (2.0 * var);
    }
    (ll, k * (dim + 1) + k - 1)
}

/// `Ψ = −L + γ (d/2) log R + (1 − γ) d` with an explicit `γ`.
pub fn mic_with_weight(points: &[Vec<f64>], labels: &[usize], k: usize, gamma: f64) -> f64 {
    let (ll, d) = log_likelihood(points, labels, k);
    let d = d as f64;
    -ll + gamma * (d / 2.0) * (points.len() as f64).ln() + (1.0 - gamma) * d
}

/// MIC with `γ` from [`variance_weight`] of the same partition.
pub fn mic(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    mic_with_weight(points, labels, k, variance_weight(points, labels, k))
}

/// Fraction of point pairs on which two labelings agree about being in
/// the same cluster. Equals 1 exactly when they match up to relabeling.
pub fn pair_agreement(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len().min(b.len());
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub n_c: usize,
    /// Zero-based label of every point.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
    pub mic: f64,
    /// Global MIC after the initial k-means and after every split round.
    pub mic_trace: Vec<f64>,
}

/// Relabels clusters in order of first appearance so equal partitions get
/// equal labels.
fn canonical(labels: &[usize], k: usize) -> (Vec<usize>, usize) {
    let mut map = vec![usize::MAX; k];
    let mut next = 0;
    let out = labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect();
    (out, next)
}

/// A singleton child has a floored variance and an unbounded likelihood
/// gain, so splits must leave at least this many points on each side.
const MIN_CHILD: usize = 2;

fn two_means(sub: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Option<(Vec<usize>, Vec<Vec<f64>>)> {
    if sub.len() < 2 * MIN_CHILD {
        return None;
    }
    let (labels, centers) = kmeans(sub, 2, rng);
    let ones = labels.iter().filter(|&&l| l == 1).count();
    (ones >= MIN_CHILD && sub.len() - ones >= MIN_CHILD).then_some((labels, centers))
}

/// Child centers if splitting `sub` lowers its MIC. A split that does not
/// pay off by itself is still taken when splitting both children once more
/// does: balanced splits of symmetric layouts (four blobs on the corners
/// of a square) leave the spherical likelihood unchanged at the first level.
fn try_split(sub: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Option<Vec<Vec<f64>>> {
    let parent = mic(sub, &vec![0; sub.len()], 1);
    let (labels, centers) = two_means(sub, rng)?;
    if mic(sub, &labels, 2) < parent {
        return Some(centers);
    }
    let mut fine = labels.clone();
    let mut k = 2;
    for side in 0..2 {
        let members: Vec<usize> = (0..sub.len()).filter(|&i| labels[i] == side).collect();
        let part: Vec<Vec<f64>> = members.iter().map(|&i| sub[i].clone()).collect();
        if let Some((inner, _)) = two_means(&part, rng) {
            for (j, &i) in members.iter().enumerate() {
                if inner[j] == 1 {
                    fine[i] = k;
                }
            }
            k += 1;
        }
    }
    (k > 2 && mic(sub, &fine, k) < parent).then_some(centers)
}

pub fn xmeans(points: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> Result<ClusterModel> {
    if k_min == 0 || k_min > k_max {
        return Err(ClusterError::BadBounds { k_min, k_max });
    }
    if points.len() < k_min {
        return Err(ClusterError::TooFewPoints {
            n: points.len(),
            k_min,
        });
    }
    // work on a canonical point order so the partition cannot depend on
    // the order the caller listed the points in
    let mut perm: Vec<usize> = (0..points.len()).collect();
    perm.sort_by(|&a, &b| {
        points[a]
            .iter()
            .zip(&points[b])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let sorted: Vec<Vec<f64>> = perm.iter().map(|&i| points[i].clone()).collect();
    let (sorted_labels, n_c, mic_trace) = xmeans_sorted(&sorted, k_min, k_max.min(points.len()), seed);
    let mut labels = vec![0; points.len()];
    for (pos, &i) in perm.iter().enumerate() {
        labels[i] = sorted_labels[pos];
    }
    let (labels, n_c) = canonical(&labels, n_c);
    let centroids = centroids(points, &labels, n_c);
    let mut sizes = vec![0; n_c];
    labels.iter().for_each(|&l| sizes[l] += 1);
    Ok(ClusterModel {
        n_c,
        mic: mic(points, &labels, n_c),
        labels,
        centroids,
        sizes,
        mic_trace,
    })
}

/// Returns labels, cluster count and the global MIC trace.
fn xmeans_sorted(points: &[Vec<f64>], k_min: usize, k_max: usize, seed: u64) -> (Vec<usize>, usize, Vec<f64>) {
    let (mut labels, mut centers) = kmeans(points, k_min, &mut rng_for(seed, &[0]));
    let mut trace = vec![mic(points, &labels, centers.len())];

    for round in 1u64.. {
        let k = centers.len();
        if k >= k_max {
            break;
        }
        let mut next_centers = Vec::new();
        let mut budget = k_max - k;
        for c in 0..k {
            let members: Vec<usize> = (0..points.len()).filter(|&i| labels[i] == c).collect();
            let sub: Vec<Vec<f64>> = members.iter().map(|&i| points[i].clone()).collect();
            let split = if budget > 0 {
                try_split(&sub, &mut rng_for(seed, &[round, c as u64]))
            } else {
                None
            };
            match split {
                Some(cs) => {
                    budget -= 1;
                    next_centers.extend(cs);
                }
                None => next_centers.push(centers[c].clone()),
            }
        }
        if next_centers.len() == k {
            break;
        }
        let (l, cs) = lloyd(points, next_centers, 100);
        labels = l;
        centers = cs;
        trace.push(mic(points, &labels, centers.len()));
    }

    let k = centers.len();
    (labels, k, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Box-Muller standard normal sample.
    fn gaussian(rng: &mut impl Rng) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, mu) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![mu[0] + sigma * gaussian(&mut rng), mu[1] + sigma * gaussian(&mut rng)]);
                truth.push(c);
            }
        }
        (pts, truth)
    }

    #[test]
    fn identical_trajectories_have_zero_distance() {
        let t = Trajectory::scalar(&[1.0, 2.0, 3.0]);
        let d = similarity_matrix(&[t.clone(), t], &[vec![1.0]], SimilarityNorm::Sqrt).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
    }

    #[test]
    fn constant_signals_one_apart() {
        let a = Trajectory::scalar(&[0.0; 4]);
        let b = Trajectory::scalar(&[1.0; 4]);
        let d = similarity_matrix(&[a, b], &[vec![1.0]], SimilarityNorm::Sqrt).unwrap();
        assert_eq!(d.get(0, 1), 4.0);
        assert_eq!(d.get(1, 0), 4.0);
    }

    #[test]
    fn length_mismatch_names_index() {
        let a = Trajectory::scalar(&[0.0; 4]);
        let b = Trajectory::scalar(&[0.0; 3]);
        assert!(matches!(
            similarity_matrix(&[a, b], &[vec![1.0]], SimilarityNorm::Sqrt),
            Err(ClusterError::ShapeMismatch { index: 1, .. })
        ));
    }

    #[test]
    fn single_feature_vector() {
        let d = similarity_matrix(&[Trajectory::scalar(&[5.0])], &[vec![1.0]], SimilarityNorm::Sqrt).unwrap();
        assert_eq!(feature_vectors(&d), vec![vec![0.0]]);
    }

    #[test]
    fn duplicated_trajectory_features() {
        let ts = [
            Trajectory::scalar(&[0.0, 1.0]),
            Trajectory::scalar(&[3.0, -1.0]),
            Trajectory::scalar(&[0.0, 1.0]),
        ];
        let z = feature_vectors(&similarity_matrix(&ts, &[vec![1.0]], SimilarityNorm::Sqrt).unwrap());
        assert_eq!(z[0], z[2]);
        assert_eq!((z[0][0], z[0][2]), (0.0, 0.0));
    }

    #[test]
    fn anchors_cover_all_when_large() {
        let ts: Vec<_> = (0..5).map(|i| Trajectory::scalar(&[i as f64])).collect();
        let d = similarity_matrix(&ts, &[vec![1.0]], SimilarityNorm::Sqrt).unwrap();
        let (a, f) = anchored_features(&d, 10, 1);
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        assert_eq!(f, feature_vectors(&d));
        let (a, f) = anchored_features(&d, 2, 1);
        assert_eq!(a.len(), 2);
        assert_eq!(f[3], vec![d.get(3, a[0]), d.get(3, a[1])]);
    }

    #[test]
    fn variance_weight_examples() {
        let single = vec![vec![0.0], vec![1.0], vec![4.0]];
        assert_eq!(variance_weight(&single, &[0, 0, 0], 1), 0.0);
        let pair = vec![vec![0.0], vec![3.0]];
        assert_eq!(variance_weight(&pair, &[0, 1], 2), 1.0);
        // V_w = 4 · 0.25 = 1; V_b = 2 · 5² + 2 · 5² = 100
        let two = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        assert!((variance_weight(&two, &[0, 0, 1, 1], 2) - 100.0 / 101.0).abs() < 1e-15);
        assert_eq!(variance_weight(&[vec![2.0], vec![2.0]], &[0, 0], 1), 0.0);
    }

    #[test]
    fn mic_two_point_dataset() {
        // μ = 0.5, σ² = 0.25, L = −ln(2π · 0.25) − 0.5 / 0.5, d = 2
        let pts = vec![vec![0.0], vec![1.0]];
        let ll = -(std::f64::consts::PI / 2.0).ln() - 1.0;
        assert!((log_likelihood(&pts, &[0, 0], 1).0 - ll).abs() < 1e-14);
        assert!((mic(&pts, &[0, 0], 1) - (-ll + 2.0)).abs() < 1e-14);
        assert!((mic_with_weight(&pts, &[0, 0], 1, 1.0) - (-ll + 2f64.ln())).abs() < 1e-14);
    }

    #[test]
    fn identical_points_give_one_cluster() {
        let pts = vec![vec![3.0, 3.0]; 40];
        assert_eq!(xmeans(&pts, 1, 8, 0).unwrap().n_c, 1);
    }

    #[test]
    fn four_blobs_recovered() {
        let (pts, truth) = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]], 50, 0.05, 9);
        let model = xmeans(&pts, 1, 10, 4).unwrap();
        assert_eq!(model.n_c, 4);
        assert_eq!(pair_agreement(&model.labels, &truth), 1.0);
        assert_eq!(model.sizes, vec![50; 4]);
    }

    #[test]
    fn pair_agreement_ignores_label_names() {
        assert_eq!(pair_agreement(&[0, 0, 1, 2], &[2, 2, 0, 1]), 1.0);
        assert!(pair_agreement(&[0, 0, 1], &[0, 1, 1]) < 1.0);
    }

    #[test]
    fn bad_bounds() {
        let pts = vec![vec![0.0]; 2];
        assert!(matches!(xmeans(&pts, 3, 4, 0), Err(ClusterError::TooFewPoints { .. })));
        assert!(matches!(xmeans(&pts, 0, 4, 0), Err(ClusterError::BadBounds { .. })));
    }
}
