//! Seeded K-Means with k-means++ seeding.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub(crate) const MAX_ITERS: usize = 100;

fn nearest(centroids: &[DVector<f64>], x: &DVector<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = (x - m).norm_squared();
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// `k` centroids of `points` after at most `max_iters` Lloyd iterations.
///
/// A cluster that loses all its points keeps its previous centroid.
pub fn kmeans(points: &[DVector<f64>], k: usize, seed: u64, max_iters: usize) -> Result<Vec<DVector<f64>>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if points.len() < k {
        return Err(Error::InsufficientPoints {
            needed: k,
            got: points.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| (p - &centroids[0]).norm_squared()).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = d2.iter().rposition(|&d| d > 0.0).unwrap();
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // every point coincides with a centroid; duplicates are unavoidable
            rng.random_range(0..points.len())
        };
        let c = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((p - &c).norm_squared());
        }
        centroids.push(c);
    }

    let dim = points[0].len();
    let mut assignment = vec![usize::MAX; points.len()];
    for _ in 0..max_iters {
        let mut changed = false;
        for (a, p) in assignment.iter_mut().zip(points) {
            let (c, _) = nearest(&centroids, p);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignment.iter().zip(points) {
            sums[a] += p;
            counts[a] += 1;
        }
        for ((c, s), n) in centroids.iter_mut().zip(sums).zip(counts) {
            if n > 0 {
                *c = s / n as f64;
            }
        }
    }
    Ok(centroids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn separated_blobs_give_their_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let centers = [DVector::from_vec(vec![5.0, 5.0, 0.0]), DVector::from_vec(vec![-5.0, 0.0, 5.0])];
        let points: Vec<DVector<f64>> = (0..200)
            .map(|i| &centers[i % 2] + DVector::from_fn(3, |_, _| noise.sample(&mut rng)))
            .collect();
        let means: Vec<DVector<f64>> = (0..2)
            .map(|b| {
                let members: Vec<_> = points.iter().skip(b).step_by(2).collect();
                members.iter().fold(DVector::zeros(3), |acc, p| acc + *p) / members.len() as f64
            })
            .collect();
        let got = kmeans(&points, 2, 7, MAX_ITERS).unwrap();
        for m in &means {
            let best = got.iter().map(|c| (c - m).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9);
        }
    }

    #[test]
    fn k_equal_to_n_returns_the_points() {
        let points: Vec<DVector<f64>> = (0..5).map(|i| DVector::from_vec(vec![i as f64, 0.0])).collect();
        let mut got = kmeans(&points, 5, 3, MAX_ITERS).unwrap();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, points);
        assert!(kmeans(&points, 6, 3, MAX_ITERS).is_err());
    }

    #[test]
    fn seeded_runs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<DVector<f64>> = (0..100).map(|_| DVector::from_fn(4, |_, _| rng.random())).collect();
        assert_eq!(kmeans(&points, 6, 11, MAX_ITERS).unwrap(), kmeans(&points, 6, 11, MAX_ITERS).unwrap());
    }
}
