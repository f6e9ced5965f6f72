//! Exact Lloyd k-means with k-means++ seeding.
//!
//! The assignment step may run data-parallel (each point is independent);
//! centroid accumulation always reduces sequentially in point-index order
//! so results are bit-identical regardless of thread count.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;

/// A fitted centroid vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidVocabulary {
    /// k x D centroid matrix.
    pub centroids: Tensor,
    /// Sum of squared distances at convergence.
    pub inertia: f64,
    /// Inertia measured after every assignment step (non-increasing).
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn nearest_of(point: &[f64], centroids: &Tensor) -> (usize, f64) {
    let d = centroids.last_dim();
    let k = centroids.shape()[0];
    let mut best = (0usize, f64::INFINITY);
    for c in 0..k {
        let dist = sq_dist(point, &centroids.data()[c * d..(c + 1) * d]);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

/// Nearest centroid (squared Euclidean, ties to the lower index) and the
/// squared distance, per point. Parallel when the feature is enabled.
pub fn nearest_centroids(points: &Tensor, centroids: &Tensor) -> Vec<(usize, f64)> {
    let d = points.last_dim();
    let n = points.leading_len();
    par::map_indices(n, |i| {
        nearest_of(&points.data()[i * d..(i + 1) * d], centroids)
    })
}

/// Sequential twin of [`nearest_centroids`], for benches and equality tests.
pub fn nearest_centroids_seq(points: &Tensor, centroids: &Tensor) -> Vec<(usize, f64)> {
    let d = points.last_dim();
    let n = points.leading_len();
    par::map_indices_seq(n, |i| {
        nearest_of(&points.data()[i * d..(i + 1) * d], centroids)
    })
}

/// k-means++ seeding: first centroid uniform, the rest D^2-weighted.
fn seed_centroids(points: &Tensor, k: usize, rng: &mut Rng) -> Tensor {
    let d = points.last_dim();
    let n = points.leading_len();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.next_below(n as u64) as usize);
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| {
            sq_dist(
                &points.data()[i * d..(i + 1) * d],
                &points.data()[chosen[0] * d..(chosen[0] + 1) * d],
            )
        })
        .collect();
    while chosen.len() < k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.next_f64() * total;
            let mut pick = n - 1;
            for (i, &w) in min_d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.next_below(n as u64) as usize
        };
        chosen.push(pick);
        for i in 0..n {
            let dist = sq_dist(
                &points.data()[i * d..(i + 1) * d],
                &points.data()[pick * d..(pick + 1) * d],
            );
            if dist < min_d2[i] {
                min_d2[i] = dist;
            }
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &i in &chosen {
        data.extend_from_slice(&points.data()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![k, d], data).expect("seed centroid shape")
}

/// Lloyd iterations until the maximum centroid shift drops below `tol`
/// or `max_iter` is reached. Empty clusters are re-seeded to the point
/// farthest from its current centroid. Deterministic given the seed.
pub fn kmeans_fit(
    points: &Tensor,
    k: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<CentroidVocabulary> {
    if points.rank() != 2 {
        return Err(Error::input(format!(
            "kmeans_fit expects an N x D matrix, got {:?}",
            points.shape()
        )));
    }
    let n = points.shape()[0];
    let d = points.shape()[1];
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    if n < k {
        return Err(Error::input(format!("{n} points cannot seed {k} clusters")));
    }

    let mut rng = Rng::new(seed);
    let mut centroids = seed_centroids(points, k, &mut rng);
    let mut history = Vec::new();
    let mut assignments;
    let mut inertia;

    for _ in 0..max_iter.max(1) {
        assignments = nearest_centroids(points, &centroids);
        inertia = assignments.iter().map(|&(_, dist)| dist).sum::<f64>();
        if let Some(&prev) = history.last() {
            debug_assert!(
                inertia <= prev + 1e-9,
                "inertia must be non-increasing ({prev} -> {inertia})"
            );
        }
        history.push(inertia);

        // Means accumulated in point order for bit-determinism.
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignments.iter().enumerate() {
            counts[c] += 1;
            let row = &points.data()[i * d..(i + 1) * d];
            let acc = &mut sums[c * d..(c + 1) * d];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for dim in 0..d {
                    next.data_mut()[c * d + dim] = sums[c * d + dim] / counts[c] as f64;
                }
            }
        }
        // Re-seed empty clusters to the farthest points (ties: lower index);
        // each empty cluster takes a distinct point.
        let mut taken = std::collections::BTreeSet::new();
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = (usize::MAX, -1.0);
                for (i, &(_, dist)) in assignments.iter().enumerate() {
                    if dist > far.1 && !taken.contains(&i) {
                        far = (i, dist);
                    }
                }
                if far.0 == usize::MAX {
                    continue;
                }
                taken.insert(far.0);
                let row = &points.data()[far.0 * d..(far.0 + 1) * d];
                next.data_mut()[c * d..(c + 1) * d].copy_from_slice(row);
            }
        }

        let mut max_shift: f64 = 0.0;
        for c in 0..k {
            let shift = sq_dist(
                &centroids.data()[c * d..(c + 1) * d],
                &next.data()[c * d..(c + 1) * d],
            )
            .sqrt();
            max_shift = max_shift.max(shift);
        }
        centroids = next;
        if max_shift < tol {
            break;
        }
    }

    let final_assign = nearest_centroids(points, &centroids);
    let inertia = final_assign.iter().map(|&(_, dist)| dist).sum::<f64>();
    if let Some(&prev) = history.last() {
        debug_assert!(inertia <= prev + 1e-9);
    }
    history.push(inertia);
    Ok(CentroidVocabulary {
        centroids,
        inertia,
        inertia_history: history,
    })
}
