//! Independent reference computations used by the integration tests.
#![allow(dead_code)]

use mkanon::FeatureMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(rows: usize, dim: usize, seed: u64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    FeatureMatrix::new(data, rows, dim).unwrap()
}

pub fn rows_f64(m: &FeatureMatrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum k-means cost over every partition of `points` into exactly `k`
/// non-empty clusters (restricted-growth enumeration).
pub fn brute_force_kmeans(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    assert!(k >= 1 && k <= n);
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    fn cost(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let d = points[0].len();
        let mut sums = vec![vec![0f64; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(labels) {
            counts[l] += 1;
            for j in 0..d {
                sums[l][j] += p[j];
            }
        }
        let means: Vec<Vec<f64>> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| s.iter().map(|v| v / c as f64).collect())
            .collect();
        points.iter().zip(labels).map(|(p, &l)| sq(p, &means[l])).sum()
    }
    fn rec(i: usize, used: usize, points: &[Vec<f64>], k: usize, labels: &mut Vec<usize>, best: &mut f64) {
        let n = points.len();
        if n - i < k - used {
            return;
        }
        if i == n {
            if used == k {
                let c = cost(points, labels, k);
                if c < *best {
                    *best = c;
                }
            }
            return;
        }
        for l in 0..=used.min(k - 1) {
            labels[i] = l;
            rec(i + 1, used.max(l + 1), points, k, labels, best);
        }
    }
    rec(0, 0, points, k, &mut labels, &mut best);
    best
}

/// EER by direct counting at every pooled score (no sorting tricks).
pub fn eer_oracle(genuine: &[f64], impostor: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let mut best = (f64::INFINITY, 0.0);
    for &t in &thresholds {
        let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
        let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, (far + frr) / 2.0);
        }
    }
    100.0 * best.1
}

/// Nearest centroid by exhaustive search; ties to the lowest index.
pub fn nearest_oracle(frame: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    for (i, c) in centroids.iter().enumerate() {
        if sq(frame, c) < sq(frame, &centroids[best]) {
            best = i;
        }
    }
    best
}

/// k-NN mean with cosine distance via a full sort of the bank.
pub fn knn_oracle(query: &[f64], bank: &[Vec<f64>], k: usize) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scored: Vec<(f64, usize)> = bank
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let dot: f64 = query.iter().zip(b).map(|(x, y)| x * y).sum();
            let (nq, nb) = (norm(query), norm(b));
            let dist = if nq == 0.0 || nb == 0.0 { f64::INFINITY } else { 1.0 - dot / (nq * nb) };
            (dist, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let d = query.len();
    let mut mean = vec![0f64; d];
    for &(_, i) in scored.iter().take(k) {
        for j in 0..d {
            mean[j] += bank[i][j];
        }
    }
    mean.iter().map(|v| v / k as f64).collect()
}
