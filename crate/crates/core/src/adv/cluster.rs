//! Alternative clustering back-ends behind [`FrameClusterer`].

use super::kmeans::{distinct_count, kmeans, sq_dist, KMeansParams};
use super::ClusteringResult;

/// Groups frame embeddings into `k` clusters.
pub trait FrameClusterer {
    fn cluster(&self, points: &[Vec<f64>], k: usize) -> ClusteringResult;
}

#[derive(Debug, Clone, Copy)]
pub struct KMeans(pub KMeansParams);

impl FrameClusterer for KMeans {
    fn cluster(&self, points: &[Vec<f64>], k: usize) -> ClusteringResult {
        kmeans(points, k, &self.0)
    }
}

fn means(points: &[Vec<f64>], assignment: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| s.into_iter().map(|v| v / n.max(1) as f64).collect())
        .collect()
}

/// Average-linkage agglomerative clustering on squared Euclidean distance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Agglomerative;

impl FrameClusterer for Agglomerative {
    fn cluster(&self, points: &[Vec<f64>], k: usize) -> ClusteringResult {
        let n = points.len();
        let requested = k.clamp(1, n);
        let k = requested.min(distinct_count(points));
        let mut groups: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        while groups.len() > k {
            let mut best = (0, 1, f64::INFINITY);
            for a in 0..groups.len() {
                for b in a + 1..groups.len() {
                    let total: f64 = groups[a]
                        .iter()
                        .flat_map(|&i| groups[b].iter().map(move |&j| (i, j)))
                        .map(|(i, j)| sq_dist(&points[i], &points[j]))
                        .sum();
                    let avg = total / (groups[a].len() * groups[b].len()) as f64;
                    if avg < best.2 {
                        best = (a, b, avg);
                    }
                }
            }
            let merged = groups.remove(best.1);
            groups[best.0].extend(merged);
        }
        let mut assignment = vec![0; n];
        for (g, members) in groups.iter().enumerate() {
            for &i in members {
                assignment[i] = g;
            }
        }
        let centroids = means(points, &assignment, k);
        let inertia = points
            .iter()
            .zip(&assignment)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        ClusteringResult::canonical(centroids, assignment, inertia, k < requested)
    }
}

/// Spherical Gaussian mixture fitted by EM, initialized from k-means.
/// Frames go to their most responsible component; components that end up
/// with no frames are dropped.
#[derive(Debug, Clone, Copy)]
pub struct Gmm {
    pub init: KMeansParams,
    pub iters: usize,
}

impl FrameClusterer for Gmm {
    fn cluster(&self, points: &[Vec<f64>], k: usize) -> ClusteringResult {
        let init = kmeans(points, k, &self.init);
        let k = init.k;
        let n = points.len();
        let dim = points[0].len() as f64;
        let mut means_ = init.centroids.clone();
        let mut weights = vec![1.0 / k as f64; k];
        let mut vars = vec![1e-3; k];
        let mut resp = vec![vec![0.0; k]; n];
        for _ in 0..self.iters {
            // E step, in log space.
            for (p, r) in points.iter().zip(resp.iter_mut()) {
                let logs: Vec<f64> = (0..k)
                    .map(|c| {
                        weights[c].ln()
                            - 0.5 * dim * (2.0 * std::f64::consts::PI * vars[c]).ln()
                            - sq_dist(p, &means_[c]) / (2.0 * vars[c])
                    })
                    .collect();
                let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logs.iter().map(|l| (l - max).exp()).sum();
                for (rc, l) in r.iter_mut().zip(&logs) {
                    *rc = (l - max).exp() / total;
                }
            }
            // M step.
            for c in 0..k {
                let nk: f64 = resp.iter().map(|r| r[c]).sum();
                if nk < 1e-12 {
                    continue;
                }
                weights[c] = nk / n as f64;
                let mut m = vec![0.0; points[0].len()];
                for (p, r) in points.iter().zip(&resp) {
                    for (mi, v) in m.iter_mut().zip(p) {
                        *mi += r[c] * v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= nk);
                let var: f64 = points
                    .iter()
                    .zip(&resp)
                    .map(|(p, r)| r[c] * sq_dist(p, &m))
                    .sum::<f64>()
                    / (nk * dim);
                vars[c] = var.max(1e-6);
                means_[c] = m;
            }
        }
        let assignment: Vec<usize> = resp
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect();
        // Drop empty components and relabel.
        let mut used: Vec<usize> = assignment.clone();
        used.sort();
        used.dedup();
        let remap = |a: usize| used.iter().position(|&u| u == a).unwrap();
        let assignment: Vec<usize> = assignment.into_iter().map(remap).collect();
        let centroids = means(points, &assignment, used.len());
        let inertia = points
            .iter()
            .zip(&assignment)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        ClusteringResult::canonical(centroids, assignment, inertia, init.degenerate)
    }
}
