//! Seeded k-means with k-means++ initialization and best-of-n restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClusteringResult;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub seed: u64,
    pub max_iters: usize,
    pub restarts: usize,
    /// Stop once no centroid moves farther than this.
    pub tolerance: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 100,
            restarts: 5,
            tolerance: 1e-6,
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Number of pairwise distinct points (bitwise comparison).
pub(crate) fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    keys.sort();
    keys.dedup();
    keys.len()
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    pick = i;
                    break;
                }
            }
            // Guard against rounding leaving `pick` on an existing center.
            if d2[pick] == 0.0 {
                pick = d2
                    .iter()
                    .enumerate()
                    .filter(|(_, d)| **d > 0.0)
                    .map(|(i, _)| i)
                    .next_back()
                    .unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next].clone();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<usize> {
    points.iter().map(|p| nearest(p, centroids).0).collect()
}

/// Moves the centroid of every empty cluster onto the point farthest from
/// its own centroid, then reassigns. Terminates because each repair pins a
/// distinct point to a previously empty cluster.
fn repair_empty(points: &[Vec<f64>], centroids: &mut [Vec<f64>], assignment: &mut Vec<usize>) {
    let k = centroids.len();
    for _ in 0..k {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[assignment[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignment[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((far, _)) = far else {
            return;
        };
        centroids[empty] = points[far].clone();
        *assignment = assign(points, centroids);
        assignment[far] = empty;
    }
}

fn recompute(points: &[Vec<f64>], assignment: &[usize], centroids: &mut [Vec<f64>]) {
    let dim = points[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
        if n > 0 {
            *c = s.into_iter().map(|v| v / n as f64).collect();
        }
    }
}

fn inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn lloyd(
    points: &[Vec<f64>],
    k: usize,
    params: &KMeansParams,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignment);
    for _ in 0..params.max_iters {
        let previous = centroids.clone();
        recompute(points, &assignment, &mut centroids);
        assignment = assign(points, &centroids);
        repair_empty(points, &mut centroids, &mut assignment);
        let shift = previous
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        if shift < params.tolerance {
            break;
        }
    }
    let score = inertia(points, &centroids, &assignment);
    (centroids, assignment, score)
}

/// Clusters `points` into at most `k` groups.
///
/// When fewer than `k` distinct points exist the result has as many
/// clusters as distinct points and `degenerate` is set.
pub fn kmeans(points: &[Vec<f64>], k: usize, params: &KMeansParams) -> ClusteringResult {
    assert!(!points.is_empty(), "kmeans needs at least one point");
    let requested = k.clamp(1, points.len());
    let distinct = distinct_count(points);
    let k = requested.min(distinct);
    let degenerate = k < requested;
    if degenerate {
        log::warn!("only {distinct} distinct frame embeddings; clustering with k={k} instead of {requested}");
    }
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for restart in 0..params.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed.wrapping_add(restart as u64));
        let run = lloyd(points, k, params, &mut rng);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centroids, assignment, inertia) = best.expect("at least one restart");
    ClusteringResult::canonical(centroids, assignment, inertia, degenerate)
}
