//! Lloyd k-means with seeded k-means++ initialization, and a size-balanced variant.
//!
//! Points are passed as a flat row-major `&[f64]` with an explicit dimension.
//! Every tie (seeding, assignment, repair) resolves to the lowest index.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Result of a k-means fit.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub dim: usize,
    pub k: usize,
    /// Row-major `k × dim` centroid table.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Total within-cluster squared error of the final assignment.
    pub sse: f64,
    /// SSE after every assignment step, including the final one.
    pub sse_history: Vec<f64>,
    /// Number of empty-cluster repairs performed.
    pub repairs: usize,
}

impl KMeansFit {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest row in `table`; lowest index wins ties.
#[inline]
pub(crate) fn nearest(point: &[f64], table: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in table.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_input(points: &[f64], dim: usize, k: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be > 0".into()));
    }
    if points.is_empty() {
        return Err(Error::Empty("k-means point set"));
    }
    if points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "point buffer length {} is not a multiple of dimension {dim}",
            points.len()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means points"));
    }
    Ok(points.len() / dim)
}

/// Deterministic k-means++ seeding driven by `seed`.
pub fn kmeans_pp_seed(points: &[f64], dim: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), row(first))).collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            // guard against float slack at the end of the cumulative sum
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(0);
            }
            chosen
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..n)
        };
        let c = row(pick).to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            let d = sq_dist(row(i), &c);
            if d < *w {
                *w = d;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn assign_nearest(points: &[f64], dim: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    points
        .par_chunks_exact(dim)
        .map(|p| nearest(p, centroids, dim))
        .unzip()
}

fn distance_matrix(points: &[f64], dim: usize, centroids: &[f64]) -> Vec<f64> {
    let k = centroids.len() / dim;
    points
        .par_chunks_exact(dim)
        .flat_map_iter(|p| centroids.chunks_exact(dim).map(move |c| sq_dist(p, c)))
        .collect::<Vec<_>>()
        .chunks_exact(k)
        .flatten()
        .copied()
        .collect()
}

/// Recomputes centroids as cluster means; empty clusters are re-seeded with
/// the point farthest from its assigned centroid. Returns the repair count.
fn update_centroids(
    points: &[f64],
    dim: usize,
    assignments: &[usize],
    dists: &[f64],
    centroids: &mut [f64],
) -> usize {
    let k = centroids.len() / dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks_exact(dim).zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    let mut used = vec![false; assignments.len()];
    let mut repairs = 0;
    for c in 0..k {
        if counts[c] > 0 {
            let inv = counts[c] as f64;
            for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *dst = s / inv;
            }
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &d) in dists.iter().enumerate() {
            if used[i] {
                continue;
            }
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        if let Some((i, _)) = far {
            used[i] = true;
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
            repairs += 1;
        }
    }
    repairs
}

/// Lloyd iterations from explicit starting centroids.
pub fn lloyd_from(points: &[f64], dim: usize, init: Vec<f64>, iters: usize) -> Result<KMeansFit> {
    let k = init.len() / dim;
    let n = check_input(points, dim, k)?;
    let mut centroids = init;
    let mut history = Vec::with_capacity(iters + 1);
    let mut repairs = 0;
    for _ in 0..iters {
        let (assign, dists) = assign_nearest(points, dim, &centroids);
        history.push(dists.iter().sum());
        repairs += update_centroids(points, dim, &assign, &dists, &mut centroids);
    }
    let (assignments, dists) = assign_nearest(points, dim, &centroids);
    let sse: f64 = dists.iter().sum();
    history.push(sse);
    debug_assert_eq!(assignments.len(), n);
    Ok(KMeansFit {
        dim,
        k,
        centroids,
        assignments,
        sse,
        sse_history: history,
        repairs,
    })
}

/// Standard k-means: seeded k-means++ followed by `iters` Lloyd iterations.
pub fn kmeans_fit(points: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    check_input(points, dim, k)?;
    let init = kmeans_pp_seed(points, dim, k, seed);
    lloyd_from(points, dim, init, iters)
}

/// Per-cluster size quotas: `n mod k` clusters may hold `⌈n/k⌉`, the rest `⌊n/k⌋`.
struct Quota {
    base: usize,
    extra: usize,
    extra_used: usize,
}

impl Quota {
    fn new(n: usize, k: usize) -> Self {
        Self {
            base: n / k,
            extra: n % k,
            extra_used: 0,
        }
    }

    fn admits(&self, count: usize) -> bool {
        count < self.base || (count == self.base && self.extra_used < self.extra)
    }

    fn take(&mut self, count: usize) {
        if count == self.base {
            self.extra_used += 1;
        }
    }
}

/// Greedy-margin balanced assignment over an `n × k` distance matrix.
///
/// Points are visited by decreasing (second-best − best) distance and each
/// goes to its nearest cluster that still has quota left. Cluster sizes end up
/// exactly `⌈n/k⌉` or `⌊n/k⌋`.
pub fn balanced_assign(dists: &[f64], n: usize, k: usize) -> Vec<usize> {
    let mut ranked: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut margins = Vec::with_capacity(n);
    for i in 0..n {
        let row = &dists[i * k..(i + 1) * k];
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
        let margin = if k > 1 { row[order[1]] - row[order[0]] } else { 0.0 };
        margins.push(margin);
        ranked.push(order);
    }
    let mut visit: Vec<usize> = (0..n).collect();
    visit.sort_by(|&a, &b| margins[b].total_cmp(&margins[a]).then(a.cmp(&b)));

    let mut quota = Quota::new(n, k);
    let mut counts = vec![0usize; k];
    let mut out = vec![usize::MAX; n];
    for i in visit {
        let c = ranked[i]
            .iter()
            .copied()
            .find(|&c| quota.admits(counts[c]))
            .expect("quota always leaves room for every point");
        quota.take(counts[c]);
        counts[c] += 1;
        out[i] = c;
    }
    out
}

/// Pairwise swap pass: exchanges two points between clusters whenever that
/// lowers their summed distance. Sizes are unchanged.
fn refine_by_swaps(dists: &[f64], k: usize, assign: &mut [usize], max_passes: usize) {
    let n = assign.len();
    for _ in 0..max_passes {
        let mut improved = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (assign[i], assign[j]);
                if a == b {
                    continue;
                }
                let now = dists[i * k + a] + dists[j * k + b];
                let swapped = dists[i * k + b] + dists[j * k + a];
                if swapped < now - 1e-12 * now.abs().max(1.0) {
                    assign[i] = b;
                    assign[j] = a;
                    improved = true;
                }
            }
        }
        if !improved {
            break;
        }
    }
}

/// Point count up to which balanced assignments get a pairwise swap refinement.
const SWAP_REFINE_LIMIT: usize = 1024;

fn balanced_step(points: &[f64], dim: usize, k: usize, centroids: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let n = points.len() / dim;
    let dm = distance_matrix(points, dim, centroids);
    let mut assign = balanced_assign(&dm, n, k);
    if n <= SWAP_REFINE_LIMIT {
        refine_by_swaps(&dm, k, &mut assign, 8);
    }
    let dists = assign.iter().enumerate().map(|(i, &c)| dm[i * k + c]).collect();
    (assign, dists)
}

/// Local search on the exact SSE of a balanced partition: pair swaps between
/// clusters, and single moves from a `⌈n/k⌉` cluster into a `⌊n/k⌋` one.
/// Uses SSE = Σ‖x‖² − Σ_c ‖S_c‖²/n_c, so only cluster sums are tracked.
/// Returns whether anything moved.
fn polish_balanced(points: &[f64], dim: usize, k: usize, assign: &mut [usize]) -> bool {
    let n = assign.len();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in assign.iter().enumerate() {
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
            *s += v;
        }
    }
    let norm = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
    // gain of replacing cluster c's sum by S_c - out + inn with size m
    let term = |sums: &[f64], c: usize, out: Option<usize>, inn: Option<usize>, m: usize| -> f64 {
        if m == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for d in 0..dim {
            let mut v = sums[c * dim + d];
            if let Some(i) = out {
                v -= points[i * dim + d];
            }
            if let Some(j) = inn {
                v += points[j * dim + d];
            }
            acc += v * v;
        }
        acc / m as f64
    };
    let apply = |sums: &mut [f64], c: usize, i: usize, sign: f64| {
        for d in 0..dim {
            sums[c * dim + d] += sign * points[i * dim + d];
        }
    };
    let base = n / k;
    let mut moved = false;
    for _ in 0..50 {
        let mut improved = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (assign[i], assign[j]);
                if a == b {
                    continue;
                }
                let now = norm(&sums[a * dim..(a + 1) * dim]) / counts[a] as f64
                    + norm(&sums[b * dim..(b + 1) * dim]) / counts[b] as f64;
                let then = term(&sums, a, Some(i), Some(j), counts[a]) + term(&sums, b, Some(j), Some(i), counts[b]);
                if then > now + 1e-12 * now.abs().max(1.0) {
                    apply(&mut sums, a, i, -1.0);
                    apply(&mut sums, a, j, 1.0);
                    apply(&mut sums, b, j, -1.0);
                    apply(&mut sums, b, i, 1.0);
                    assign[i] = b;
                    assign[j] = a;
                    improved = true;
                }
            }
        }
        if n % k != 0 {
            for i in 0..n {
                let a = assign[i];
                if counts[a] != base + 1 {
                    continue;
                }
                for b in 0..k {
                    if counts[b] != base {
                        continue;
                    }
                    let now = norm(&sums[a * dim..(a + 1) * dim]) / counts[a] as f64
                        + if counts[b] > 0 { norm(&sums[b * dim..(b + 1) * dim]) / counts[b] as f64 } else { 0.0 };
                    let then = term(&sums, a, Some(i), None, counts[a] - 1) + term(&sums, b, None, Some(i), counts[b] + 1);
                    if then > now + 1e-12 * now.abs().max(1.0) {
                        apply(&mut sums, a, i, -1.0);
                        apply(&mut sums, b, i, 1.0);
                        counts[a] -= 1;
                        counts[b] += 1;
                        assign[i] = b;
                        improved = true;
                        break;
                    }
                }
            }
        }
        moved |= improved;
        if !improved {
            break;
        }
    }
    moved
}

/// Balanced k-means: Lloyd iterations whose assignment step is the greedy
/// balanced assignment, so every cluster holds `⌊n/k⌋` or `⌈n/k⌉` points.
/// Small inputs get an exact-SSE swap polish and the best of several seeded runs.
pub fn balanced_kmeans_fit(points: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeansFit> {
    let n = check_input(points, dim, k)?;
    let restarts = if n <= RESTART_LIMIT { SMALL_RESTARTS } else { 1 };
    let mut best = balanced_run(points, dim, k, iters, seed);
    for r in 1..restarts {
        let fit = balanced_run(points, dim, k, iters, seed.wrapping_add(r.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        if fit.sse < best.sse {
            best = fit;
        }
    }
    Ok(best)
}

/// Point count up to which balanced k-means keeps the best of several seeded runs.
const RESTART_LIMIT: usize = 256;
const SMALL_RESTARTS: u64 = 8;

fn balanced_run(points: &[f64], dim: usize, k: usize, iters: usize, seed: u64) -> KMeansFit {
    let mut centroids = kmeans_pp_seed(points, dim, k, seed);
    let mut history = Vec::with_capacity(iters + 1);
    let mut repairs = 0;
    for _ in 0..iters {
        let (assign, dists) = balanced_step(points, dim, k, &centroids);
        history.push(dists.iter().sum());
        repairs += update_centroids(points, dim, &assign, &dists, &mut centroids);
    }
    let (mut assignments, mut dists) = balanced_step(points, dim, k, &centroids);
    if assignments.len() <= SWAP_REFINE_LIMIT && polish_balanced(points, dim, k, &mut assignments) {
        repairs += update_centroids(points, dim, &assignments, &dists, &mut centroids);
        dists = assignments
            .iter()
            .enumerate()
            .map(|(i, &c)| sq_dist(&points[i * dim..(i + 1) * dim], &centroids[c * dim..(c + 1) * dim]))
            .collect();
    }
    let sse: f64 = dists.iter().sum();
    history.push(sse);
    KMeansFit {
        dim,
        k,
        centroids,
        assignments,
        sse,
        sse_history: history,
        repairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive SSE over every labelling of `points` into `k` clusters
    /// (optionally restricted to balanced labellings).
    fn exhaustive_best_sse(points: &[f64], dim: usize, k: usize, balanced: bool) -> f64 {
        let n = points.len() / dim;
        let total = k.pow(n as u32);
        let mut best = f64::INFINITY;
        for code in 0..total {
            let mut labels = vec![0; n];
            let mut c = code;
            for l in labels.iter_mut() {
                *l = c % k;
                c /= k;
            }
            let mut sizes = vec![0usize; k];
            for &l in &labels {
                sizes[l] += 1;
            }
            if balanced {
                let (mn, mx) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
                if mx - mn > 1 {
                    continue;
                }
            }
            let mut sse = 0.0;
            for cl in 0..k {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == cl).collect();
                if members.is_empty() {
                    continue;
                }
                for j in 0..dim {
                    let mean = members.iter().map(|&i| points[i * dim + j]).sum::<f64>() / members.len() as f64;
                    sse += members.iter().map(|&i| (points[i * dim + j] - mean).powi(2)).sum::<f64>();
                }
            }
            best = best.min(sse);
        }
        best
    }

    fn sorted_centroids(fit: &KMeansFit) -> Vec<f64> {
        let mut c = fit.centroids.clone();
        c.sort_by(f64::total_cmp);
        c
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let fit = kmeans_fit(&[0.0, 1.0, 10.0, 11.0], 1, 1, 25, 7).unwrap();
        assert_eq!(fit.centroids, vec![5.5]);
    }

    #[test]
    fn two_clusters_match_exhaustive_optimum() {
        let pts = [0.0, 1.0, 10.0, 11.0];
        let oracle = exhaustive_best_sse(&pts, 1, 2, false);
        assert_eq!(oracle, 1.0);
        for seed in 0..10 {
            let fit = kmeans_fit(&pts, 1, 2, 25, seed).unwrap();
            assert_eq!(sorted_centroids(&fit), vec![0.5, 10.5]);
            assert_eq!(fit.sse, oracle);
        }
    }

    #[test]
    fn identical_points_collapse() {
        let pts = vec![3.0, -1.0].repeat(6);
        for k in 1..5 {
            let fit = kmeans_fit(&pts, 2, k, 10, 1).unwrap();
            assert_eq!(fit.sse, 0.0);
            for c in 0..k {
                assert_eq!(fit.centroid(c), &[3.0, -1.0]);
            }
        }
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(kmeans_fit(&[], 2, 2, 5, 0), Err(Error::Empty(_))));
        assert!(matches!(balanced_kmeans_fit(&[], 2, 2, 5, 0), Err(Error::Empty(_))));
        assert!(kmeans_fit(&[1.0], 1, 0, 5, 0).is_err());
    }

    #[test]
    fn more_clusters_than_points_repairs_and_stays_live() {
        let pts = [0.0, 5.0, 9.0];
        let fit = kmeans_fit(&pts, 1, 5, 10, 3).unwrap();
        assert_eq!(fit.k, 5);
        assert_eq!(fit.sse, 0.0);
        assert!(fit.centroids.iter().all(|c| pts.contains(c)));
    }

    #[test]
    fn balanced_examples() {
        let pts = [0.0, 1.0, 10.0, 11.0];
        let fit = balanced_kmeans_fit(&pts, 1, 2, 25, 0).unwrap();
        assert_eq!(fit.cluster_sizes(), vec![2, 2]);
        assert_eq!(sorted_centroids(&fit), vec![0.5, 10.5]);
        assert_eq!(fit.sse, exhaustive_best_sse(&pts, 1, 2, true));

        let pts = [4.0, -2.0, 7.5, 1.25, 3.0];
        let fit = balanced_kmeans_fit(&pts, 1, 5, 10, 9).unwrap();
        assert_eq!(fit.cluster_sizes(), vec![1; 5]);
        for (i, &a) in fit.assignments.iter().enumerate() {
            assert_eq!(fit.centroid(a), &[pts[i]]);
        }

        let pts = [0.0, 0.0, 0.0, 100.0];
        let fit = balanced_kmeans_fit(&pts, 1, 2, 25, 4).unwrap();
        assert_eq!(fit.cluster_sizes(), vec![2, 2]);
        let outlier_cluster = fit.assignments[3];
        let mates: Vec<usize> = (0..3).filter(|&i| fit.assignments[i] == outlier_cluster).collect();
        assert_eq!(mates.len(), 1);
        let oracle = exhaustive_best_sse(&pts, 1, 2, true);
        assert_eq!(oracle, 5000.0);
        assert_eq!(fit.sse, oracle);
    }

    #[test]
    fn quota_allows_exact_split() {
        // 10 points into 4 clusters must give 3,3,2,2 and never 3,3,3,1.
        let dists: Vec<f64> = (0..10).flat_map(|_| [0.0, 1.0, 2.0, 3.0]).collect();
        let a = balanced_assign(&dists, 10, 4);
        let mut sizes = [0; 4];
        for c in a {
            sizes[c] += 1;
        }
        assert_eq!(sizes, [3, 3, 2, 2]);
    }

    #[test]
    fn fits_are_deterministic() {
        let pts: Vec<f64> = (0..60).map(|i| ((i * 37) % 17) as f64 * 0.5 - (i % 3) as f64).collect();
        let a = kmeans_fit(&pts, 2, 4, 25, 11).unwrap();
        let b = kmeans_fit(&pts, 2, 4, 25, 11).unwrap();
        assert_eq!(a, b);
        let a = balanced_kmeans_fit(&pts, 2, 4, 25, 11).unwrap();
        let b = balanced_kmeans_fit(&pts, 2, 4, 25, 11).unwrap();
        assert_eq!(a, b);
    }
}
