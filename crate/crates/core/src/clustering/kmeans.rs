use rand::Rng as _;

use super::{canonical_labels, FeatureSet, PseudoLabels};
use crate::error::{invalid, Result};
use crate::rng::stream;

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub labels: PseudoLabels,
    /// Centroid per canonical label.
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to assigned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter().zip(c).map(|(&x, &y)| (x as f64 - y).powi(2)).sum()
}

fn nearest(v: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations until assignments settle.
///
/// A cluster left empty is reseeded at the point farthest from its current
/// centroid.
pub fn kmeans(features: &FeatureSet, k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    features.require_nonempty()?;
    let n = features.len();
    if k == 0 || k > n {
        return Err(invalid(format!("k = {k} outside [1, {n}]")));
    }
    let v = features.vectors();
    let to_f64 = |x: &[f32]| x.iter().map(|&a| a as f64).collect::<Vec<_>>();
    let mut rng = stream(seed, "kmeans", k as u64);

    let mut centroids = vec![to_f64(&v[rng.random_range(0..n)])];
    let mut d2: Vec<f64> = v.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = to_f64(&v[pick]);
        for (i, x) in v.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &c));
        }
        centroids.push(c);
    }

    let mut assign: Vec<usize> = v.iter().map(|x| nearest(x, &centroids).0).collect();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let dim = features.dim();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in v.iter().zip(&assign) {
            counts[a] += 1;
            sums[a].iter_mut().zip(x).for_each(|(s, &xi)| *s += xi as f64);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(&v[a], &centroids[assign[a]]).total_cmp(&sq_dist(&v[b], &centroids[assign[b]]))
                    })
                    .expect("k ≤ n leaves a cluster with two points");
                counts[assign[far]] -= 1;
                counts[j] = 1;
                assign[far] = j;
                centroids[j] = to_f64(&v[far]);
            }
        }
        let next: Vec<usize> = v.iter().map(|x| nearest(x, &centroids).0).collect();
        let mut sizes = vec![0usize; k];
        next.iter().for_each(|&a| sizes[a] += 1);
        if next == assign || sizes.contains(&0) {
            // a reassignment that would empty a cluster keeps the repaired one
            break;
        }
        assign = next;
    }

    let labels = canonical_labels(&assign);
    let mut ordered = vec![Vec::new(); k];
    for (&raw, &canon) in assign.iter().zip(&labels) {
        ordered[canon] = centroids[raw].clone();
    }
    let inertia = v.iter().zip(&labels).map(|(x, &l)| sq_dist(x, &ordered[l])).sum();
    let params = serde_json::json!({"k": k, "seed": seed});
    Ok(KMeansFit {
        labels: PseudoLabels::from_features("kmeans", params, features, &labels)?,
        centroids: ordered,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::adjusted_rand_index;
    use crate::clustering::testutil::three_blobs;

    #[test]
    fn one_cluster_centroid_is_mean() {
        let (f, _) = three_blobs(10, 3);
        let fit = kmeans(&f, 1, 0, 50).unwrap();
        let n = f.len() as f64;
        for d in 0..2 {
            let mean: f64 = f.vectors().iter().map(|v| v[d] as f64).sum::<f64>() / n;
            assert!((fit.centroids[0][d] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn k_equals_n_has_zero_inertia() {
        let (f, _) = three_blobs(4, 8);
        let fit = kmeans(&f, f.len(), 1, 50).unwrap();
        assert_eq!(fit.labels.k, f.len());
        assert!(fit.inertia.abs() < 1e-12);
    }

    #[test]
    fn recovers_blobs_for_several_seeds() {
        let (f, truth) = three_blobs(20, 2);
        for seed in 0..5 {
            let fit = kmeans(&f, 3, seed, 100).unwrap();
            assert_eq!(adjusted_rand_index(&fit.labels.labels(), &truth), 1.0, "seed {seed}");
        }
    }

    #[test]
    fn duplicate_points_still_fill_every_cluster() {
        let f = FeatureSet::new((0..6).collect(), vec![vec![0.0]; 6]).unwrap();
        let fit = kmeans(&f, 3, 0, 10).unwrap();
        assert_eq!(fit.labels.k, 3);
        assert!(fit.labels.cluster_sizes().iter().all(|&s| s > 0));
    }
}
