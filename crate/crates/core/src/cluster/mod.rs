//! Clustering pipelines over feature matrices.
//!
//! Two pipelines are provided. The direct one runs k-means on the feature
//! space exactly as given. The density one standardizes, projects onto the
//! top principal components, and runs HDBSCAN, labeling low-density points
//! as noise (-1). Agreement between labelings is measured with the
//! adjusted Rand index, with noise treated as a regular class.
//!
//! Everything here is deterministic: seeded restarts, fixed iteration
//! orders, and lowest-index tie breaking throughout.

pub mod hdbscan;

use crate::trace::PredictionTrace;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Variance floor below which a dimension counts as constant.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Lloyd convergence threshold on the maximum center shift.
pub const KMEANS_TOL: f64 = 1e-6;
pub const KMEANS_MAX_ITERS: usize = 300;
/// Independent k-means++ restarts per call; the lowest inertia wins.
pub const KMEANS_RESTARTS: usize = 10;

/// Per-column affine transform fitted by [`standardize`].
#[derive(Debug, Clone)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Standardizes columns to zero mean and unit variance in place
/// (population variance). Constant columns map to zero via the sigma
/// floor.
pub fn standardize(rows: &mut [Vec<f64>]) -> Result<Standardization> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Data(format!("standardize needs n >= 2, got {n}")));
    }
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for row in rows.iter() {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in rows.iter() {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    let sigma: Vec<f64> = var
        .iter()
        .map(|&v| {
            let s = (v / n as f64).sqrt();
            if s < SIGMA_FLOOR {
                0.0
            } else {
                s
            }
        })
        .collect();
    for row in rows.iter_mut() {
        for j in 0..d {
            row[j] = if sigma[j] == 0.0 {
                0.0
            } else {
                (row[j] - mean[j]) / sigma[j]
            };
        }
    }
    Ok(Standardization { mean, sigma })
}

/// Fitted PCA basis: orthonormal component rows, most variance first.
#[derive(Debug, Clone)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `[components][d]`, orthonormal rows.
    pub components: Vec<Vec<f64>>,
    /// Fraction of total variance per component, non-increasing.
    pub explained_variance_ratio: Vec<f64>,
}

impl PcaModel {
    /// Projects one row onto the fitted components.
    pub fn project_row(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| {
                let mut acc = 0.0;
                for (j, &cv) in c.iter().enumerate() {
                    acc += cv * (row[j] - self.mean[j]);
                }
                acc
            })
            .collect()
    }

    /// Maps a projected row back to the original space.
    pub fn reconstruct(&self, projected: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &p) in self.components.iter().zip(projected) {
            for (o, &cv) in out.iter_mut().zip(c) {
                *o += p * cv;
            }
        }
        out
    }

    pub fn cumulative_explained(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }
}

/// Fits PCA by eigendecomposition of the sample covariance and projects
/// every row. Requests beyond the covariance rank are truncated to the
/// rank, so fewer than `m` components may come back.
pub fn pca_fit_project(rows: &[Vec<f64>], m: usize) -> Result<(PcaModel, Vec<Vec<f64>>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Data(format!("pca needs n >= 2, got {n}")));
    }
    let d = rows[0].len();
    if m > n.min(d) {
        return Err(Error::Config(format!(
            "pca components {m} exceed min(n, d) = {}",
            n.min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for row in rows {
        for (s, &v) in mean.iter_mut().zip(row) {
            *s += v;
        }
    }
    for s in &mut mean {
        *s /= n as f64;
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for row in rows {
        for i in 0..d {
            let ci = row[i] - mean[i];
            for j in i..d {
                cov[(i, j)] += ci * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = Vec::with_capacity(m);
    let mut ratios = Vec::with_capacity(m);
    for &idx in order.iter().take(m) {
        let lambda = eig.eigenvalues[idx].max(0.0);
        if lambda <= top * 1e-12 {
            break;
        }
        components.push(eig.eigenvectors.column(idx).iter().copied().collect());
        ratios.push(if total > 0.0 { lambda / total } else { 0.0 });
    }
    let model = PcaModel {
        mean,
        components,
        explained_variance_ratio: ratios,
    };
    let projected = rows.iter().map(|r| model.project_row(r)).collect();
    Ok((model, projected))
}

/// K-means outcome for the best restart.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dlt = x - y;
        acc += dlt * dlt;
    }
    acc
}

fn kmeans_once(rows: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let n = rows.len();
    // k-means++ seeding: D^2-weighted draws after a uniform first pick.
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(rows[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..1.0) * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All remaining mass is on duplicates; take the first point not
            // already a center.
            (0..n)
                .find(|&i| centers.iter().all(|c| c != &rows[i]))
                .unwrap_or(0)
        };
        centers.push(rows[pick].clone());
        for (i, row) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(row, centers.last().expect("just pushed")));
        }
    }

    let mut labels = vec![0usize; n];
    let mut iterations = 0;
    for iter in 0..KMEANS_MAX_ITERS {
        iterations = iter + 1;
        for (i, row) in rows.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(row, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
        }
        let dim = rows[0].len();
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, row) in rows.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, &v) in sums[labels[i]].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its
                // current center.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&rows[a], &centers[labels[a]])
                            .total_cmp(&sq_dist(&rows[b], &centers[labels[b]]))
                    })
                    .expect("non-empty rows");
                sums[c] = rows[far].clone();
                counts[c] = 1;
                labels[far] = c;
            }
            let new_center: Vec<f64> = sums[c].iter().map(|&s| s / counts[c] as f64).collect();
            shift = shift.max(sq_dist(&new_center, &centers[c]).sqrt());
            centers[c] = new_center;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    // Final assignment against the converged centers.
    let mut inertia = 0.0;
    for (i, row) in rows.iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = sq_dist(row, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        inertia += best_d;
    }
    KMeansResult {
        labels,
        centers,
        inertia,
        iterations,
    }
}

/// Lloyd's k-means with k-means++ seeding and seeded restarts; the restart
/// with the lowest inertia wins. Deterministic given the seed.
pub fn kmeans(rows: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult> {
    let n = rows.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k={k} invalid for n={n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..KMEANS_RESTARTS {
        let cand = kmeans_once(rows, k, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => cand.inertia < b.inertia,
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn comb2(x: u64) -> f64 {
    x as f64 * (x as f64 - 1.0) / 2.0
}

/// Hubert-Arabie adjusted Rand index. Noise labels (-1) count as a regular
/// class. Degenerate labelings (no pair information on either side) score
/// 1.0 when the labelings carry identical pair structure.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "label lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as u64;
    let mut cells = std::collections::BTreeMap::<(i64, i64), u64>::new();
    let mut rows = std::collections::BTreeMap::<i64, u64>::new();
    let mut cols = std::collections::BTreeMap::<i64, u64>::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_insert(0) += 1;
        *rows.entry(x).or_insert(0) += 1;
        *cols.entry(y).or_insert(0) += 1;
    }
    let s: f64 = cells.values().map(|&c| comb2(c)).sum();
    let ra: f64 = rows.values().map(|&c| comb2(c)).sum();
    let cb: f64 = cols.values().map(|&c| comb2(c)).sum();
    let pairs = comb2(n);
    if pairs == 0.0 {
        return Ok(1.0);
    }
    let expected = ra * cb / pairs;
    let max_index = 0.5 * (ra + cb);
    let den = max_index - expected;
    if den.abs() < 1e-12 {
        return Ok(if (s - expected).abs() < 1e-12 { 1.0 } else { 0.0 });
    }
    Ok((s - expected) / den)
}

/// Fractions of predictions stabilizing early (layers 0-1), middle (2-4),
/// and late (5 and deeper).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthReport {
    pub early: f64,
    pub middle: f64,
    pub late: f64,
    pub counts: [usize; 3],
}

pub fn depth_distribution(k_star: &[f64]) -> DepthReport {
    let mut counts = [0usize; 3];
    for &k in k_star {
        if k < 2.0 {
            counts[0] += 1;
        } else if k < 5.0 {
            counts[1] += 1;
        } else {
            counts[2] += 1;
        }
    }
    let n = k_star.len().max(1) as f64;
    DepthReport {
        early: counts[0] as f64 / n,
        middle: counts[1] as f64 / n,
        late: counts[2] as f64 / n,
        counts,
    }
}

/// Greedy max-min sample selection inside one cluster, seeded at the
/// medoid. Returns row indices; all members when the cluster is small.
pub fn diverse_samples(
    rows: &[Vec<f64>],
    labels: &[i64],
    cluster: i64,
    count: usize,
) -> Result<Vec<usize>> {
    let members: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == cluster)
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        return Err(Error::Data(format!("cluster {cluster} is empty")));
    }
    if members.len() <= count {
        return Ok(members);
    }
    // Medoid: member with the smallest total distance to the others.
    let mut medoid = members[0];
    let mut best_sum = f64::INFINITY;
    for &i in &members {
        let mut sum = 0.0;
        for &j in &members {
            sum += sq_dist(&rows[i], &rows[j]).sqrt();
        }
        if sum < best_sum {
            best_sum = sum;
            medoid = i;
        }
    }
    let mut chosen = vec![medoid];
    let mut min_d: Vec<f64> = members
        .iter()
        .map(|&i| sq_dist(&rows[i], &rows[medoid]))
        .collect();
    while chosen.len() < count {
        let mut next = members[0];
        let mut next_d = f64::NEG_INFINITY;
        for (mi, &i) in members.iter().enumerate() {
            if min_d[mi] > next_d && !chosen.contains(&i) {
                next_d = min_d[mi];
                next = i;
            }
        }
        chosen.push(next);
        for (mi, &i) in members.iter().enumerate() {
            min_d[mi] = min_d[mi].min(sq_dist(&rows[i], &rows[next]));
        }
    }
    Ok(chosen)
}

/// Clusters raw dual-stream activations and scores their agreement with an
/// engineered-feature labeling. Near-zero means the engineered features
/// found structure that raw activations do not carry.
pub fn raw_activation_baseline(
    traces: &[PredictionTrace],
    engineered: &[i64],
    k: usize,
    seed: u64,
) -> Result<f64> {
    if traces.len() != engineered.len() {
        return Err(Error::Data(format!(
            "{} traces vs {} labels",
            traces.len(),
            engineered.len()
        )));
    }
    let rows: Vec<Vec<f64>> = traces
        .iter()
        .map(|t| t.raw_activation.iter().map(|&v| v as f64).collect())
        .collect();
    let km = kmeans(&rows, k, seed)?;
    let raw_labels: Vec<i64> = km.labels.iter().map(|&l| l as i64).collect();
    adjusted_rand_index(&raw_labels, engineered)
}

/// Synthetic blob generator for clustering benchmarks: `n_per` points
/// around each center with isotropic Gaussian noise.
pub fn gaussian_blobs(
    centers: &[Vec<f64>],
    n_per: usize,
    sigma: f64,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<i64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma).expect("valid sigma");
    let mut rows = Vec::with_capacity(centers.len() * n_per);
    let mut labels = Vec::with_capacity(centers.len() * n_per);
    for (ci, c) in centers.iter().enumerate() {
        for _ in 0..n_per {
            rows.push(c.iter().map(|&v| v + noise.sample(&mut rng)).collect());
            labels.push(ci as i64);
        }
    }
    (rows, labels)
}

/// Uniform random points in `[lo, hi]^d`.
pub fn uniform_cloud(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(lo..hi)).collect())
        .collect()
}
