use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    /// `n_clusters×F`, row-major.
    pub centroids: Vec<f64>,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(emb: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let dim = emb.dim;
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(emb.row(rng.gen_range(0..emb.rows)));
    let mut d2: Vec<f64> = (0..emb.rows).map(|i| sq_dist(emb.row(i), &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = emb.rows - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..emb.rows)
        };
        let start = centroids.len();
        centroids.extend_from_slice(emb.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(emb.row(i), &centroids[start..]));
        }
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start.
///
/// Stops at an assignment fixpoint or after `max_iter` rounds. A cluster
/// that loses all members is re-seeded at the point farthest from its
/// current centroid.
pub fn kmeans(emb: &EmbeddingMatrix, n_clusters: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    if n_clusters == 0 || n_clusters > emb.rows {
        return Err(Error::Config(format!(
            "cannot form {n_clusters} clusters from {} points",
            emb.rows
        )));
    }
    let dim = emb.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(emb, n_clusters, &mut rng);
    let mut assignments = vec![usize::MAX; emb.rows];
    let mut iterations = 0;

    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, _) = nearest(emb.row(i), &centroids, dim);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; n_clusters * dim];
        let mut counts = vec![0usize; n_clusters];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(emb.row(i)) {
                *s += v;
            }
        }
        for c in 0..n_clusters {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..]) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        for c in 0..n_clusters {
            if counts[c] == 0 {
                let far = (0..emb.rows)
                    .map(|i| (i, sq_dist(emb.row(i), &centroids[assignments[i] * dim..(assignments[i] + 1) * dim])))
                    .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
                    .0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(emb.row(far));
                assignments[far] = c;
            }
        }
    }
    let inertia = (0..emb.rows)
        .map(|i| sq_dist(emb.row(i), &centroids[assignments[i] * dim..(assignments[i] + 1) * dim]))
        .sum();
    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::ari;

    fn blobs(seed: u64) -> (EmbeddingMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::new();
        let mut truth = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let center = if c == 0 { -10.0 } else { 10.0 };
            values.push(center + rng.gen_range(-1.0..1.0));
            values.push(rng.gen_range(-1.0..1.0));
            truth.push(c);
        }
        (EmbeddingMatrix::new(40, 2, values, None).unwrap(), truth)
    }

    #[test]
    fn separates_far_blobs() {
        let (e, truth) = blobs(1);
        for seed in 0..5 {
            let r = kmeans(&e, 2, seed, 100).unwrap();
            assert!((ari(&r.assignments, &truth).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_cluster_per_point() {
        let (e, _) = blobs(2);
        let r = kmeans(&e, e.rows, 3, 100).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut seen = r.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), e.rows);
    }

    #[test]
    fn beats_random_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f64> = (0..30 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = EmbeddingMatrix::new(30, 3, values, None).unwrap();
        let r = kmeans(&e, 4, 7, 100).unwrap();
        for _ in 0..100 {
            let assign: Vec<usize> = (0..30).map(|_| rng.gen_range(0..4)).collect();
            // inertia of a random partition, each cluster scored against its own mean
            let mut inertia = 0.0;
            for c in 0..4 {
                let members: Vec<usize> = (0..30).filter(|&i| assign[i] == c).collect();
                if members.is_empty() {
                    continue;
                }
                for d in 0..3 {
                    let mean = members.iter().map(|&i| e.row(i)[d]).sum::<f64>() / members.len() as f64;
                    inertia += members.iter().map(|&i| (e.row(i)[d] - mean).powi(2)).sum::<f64>();
                }
            }
            assert!(r.inertia <= inertia + 1e-12);
        }
    }

    #[test]
    fn deterministic_and_validated() {
        let (e, _) = blobs(3);
        assert_eq!(kmeans(&e, 3, 1, 100).unwrap(), kmeans(&e, 3, 1, 100).unwrap());
        assert!(matches!(kmeans(&e, 41, 1, 100), Err(Error::Config(_))));
        assert!(kmeans(&e, 0, 1, 100).is_err());
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster_slot() {
        let e = EmbeddingMatrix::new(4, 1, vec![1.0, 1.0, 1.0, 2.0], None).unwrap();
        let r = kmeans(&e, 3, 0, 100).unwrap();
        assert!(r.assignments.iter().all(|&a| a < 3));
        assert_eq!(r.inertia, 0.0);
    }
}
