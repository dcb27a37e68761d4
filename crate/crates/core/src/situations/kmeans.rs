use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::util::{kmeans_pp_indices, rng_from, sq_dist};

pub const MAX_ITER: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances after each assignment step.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Lloyd's algorithm from a k-means++ start.
///
/// Stops when an assignment step changes nothing or after 100 iterations.
/// A cluster left empty is moved onto the point farthest from its current
/// centroid.
pub fn kmeans<P>(points: &[P], k: usize, seed: u64) -> Result<KMeansResult>
where
    P: AsRef<[f64]> + Sync,
{
    let n = points.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if n < k {
        return Err(Error::InsufficientSamples { needed: k, got: n });
    }
    let dim = points[0].as_ref().len();
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != dim) {
        return Err(Error::dims(dim, p.as_ref().len()));
    }
    let mut rng = rng_from(seed);
    let mut centroids: Vec<Vec<f64>> = kmeans_pp_indices(points, k, &mut rng)
        .into_iter()
        .map(|i| points[i].as_ref().to_vec())
        .collect();
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut converged = false;

    for _ in 0..MAX_ITER {
        let step: Vec<(usize, f64)> = points
            .par_iter()
            .map(|p| nearest(p.as_ref(), &centroids))
            .collect();
        objective.push(step.iter().map(|s| s.1).sum());
        let next: Vec<usize> = step.iter().map(|s| s.0).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.as_ref()) {
                *s += v;
            }
        }
        let mut dists: Vec<f64> = step.iter().map(|s| s.1).collect();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                centroids[c] = sums[c].iter().map(|s| s * inv).collect();
            } else {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, &d)| if d > dists[best] { i } else { best });
                log::warn!("k-means cluster {c} empty; re-seeding at point {far}");
                centroids[c] = points[far].as_ref().to_vec();
                dists[far] = 0.0;
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective,
        converged,
    })
}

/// Index of the nearest centroid (lowest index on ties) and the squared distance.
pub fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}
