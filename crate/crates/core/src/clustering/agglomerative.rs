use serde::{Deserialize, Serialize};

use super::{distance_matrix, FeatureSet, PseudoLabels};
use crate::error::{invalid, Result};

/// One merge step. Clusters `0..n` are the singletons; the merge at step `s`
/// creates cluster `n + s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    n: usize,
    merges: Vec<Merge>,
}

impl Dendrogram {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Flat labels after applying the first `n − k` merges, numbered in
    /// order of each cluster's lowest sample index.
    pub fn cut(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.n {
            return Err(invalid(format!("cannot cut {} points into {k} clusters", self.n)));
        }
        let mut parent: Vec<usize> = (0..2 * self.n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for m in &self.merges[..self.n - k] {
            let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
            parent[ra] = m.id;
            parent[rb] = m.id;
        }
        let roots: Vec<usize> = (0..self.n).map(|i| find(&mut parent, i)).collect();
        Ok(super::canonical_labels(&roots))
    }
}

/// Average-linkage, Euclidean, naive `O(n³)` agglomeration over all points.
///
/// On equal linkage the pair with the lowest `(min id, max id)` merges first.
pub fn build_dendrogram(features: &FeatureSet) -> Result<Dendrogram> {
    features.require_nonempty()?;
    let n = features.len();
    let mut d = distance_matrix(features);
    // slot i holds cluster `ids[i]` of `sizes[i]` points while active
    let mut ids: Vec<usize> = (0..n).collect();
    let mut sizes = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                let dist = d[i * n + j];
                let (lo, hi) = (ids[i].min(ids[j]), ids[i].max(ids[j]));
                let better = match best {
                    None => true,
                    Some((bd, blo, bhi, _, _)) => (dist, lo, hi) < (bd, blo, bhi),
                };
                if better {
                    best = Some((dist, lo, hi, i, j));
                }
            }
        }
        let (dist, lo, hi, i, j) = best.unwrap();
        let (ni, nj) = (sizes[i] as f64, sizes[j] as f64);
        for &k in &active {
            if k != i && k != j {
                let v = (ni * d[i * n + k] + nj * d[j * n + k]) / (ni + nj);
                d[i * n + k] = v;
                d[k * n + i] = v;
            }
        }
        let id = n + step;
        merges.push(Merge {
            a: lo,
            b: hi,
            distance: dist,
            id,
        });
        ids[i] = id;
        sizes[i] += sizes[j];
        active.retain(|&s| s != j);
    }
    Ok(Dendrogram { n, merges })
}

/// Builds the dendrogram once and cuts it into `k` clusters.
pub fn agglomerative(features: &FeatureSet, k: usize) -> Result<(PseudoLabels, Dendrogram)> {
    features.require_nonempty()?;
    if k == 0 || k > features.len() {
        return Err(invalid(format!("k = {k} outside [1, {}]", features.len())));
    }
    let dendrogram = build_dendrogram(features)?;
    let labels = dendrogram.cut(k)?;
    let params = serde_json::json!({"k": k, "linkage": "average", "metric": "euclidean"});
    let pl = PseudoLabels::from_features("agglomerative", params, features, &labels)?;
    Ok((pl, dendrogram))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::testutil::three_blobs;
    use crate::clustering::{adjusted_rand_index, euclidean};

    #[test]
    fn singleton_cut() {
        let (f, _) = three_blobs(5, 0);
        let (pl, d) = agglomerative(&f, f.len()).unwrap();
        assert_eq!(pl.k, f.len());
        assert_eq!(d.merges().len(), f.len() - 1);
    }

    #[test]
    fn identical_points_merge_at_zero() {
        let f = FeatureSet::new(vec![0, 1], vec![vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let (pl, d) = agglomerative(&f, 1).unwrap();
        assert_eq!(pl.k, 1);
        assert_eq!(d.merges()[0].distance, 0.0);
    }

    #[test]
    fn three_blobs_recovered() {
        let (f, truth) = three_blobs(20, 11);
        // nearest-centre oracle agrees with generation labels on this draw
        let centers = [(0.0f32, 0.0f32), (10.0, 0.0), (5.0, 75f32.sqrt())];
        let oracle: Vec<usize> = f
            .vectors()
            .iter()
            .map(|v| {
                (0..3)
                    .min_by(|&a, &b| {
                        euclidean(v, &[centers[a].0, centers[a].1])
                            .total_cmp(&euclidean(v, &[centers[b].0, centers[b].1]))
                    })
                    .unwrap()
            })
            .collect();
        assert_eq!(oracle, truth);
        let (pl, _) = agglomerative(&f, 3).unwrap();
        assert_eq!(adjusted_rand_index(&pl.labels(), &truth), 1.0);
    }

    #[test]
    fn average_linkage_matches_brute_force_mean() {
        // the first merge joining two non-singletons must equal the mean of
        // all cross pairs
        let (f, _) = three_blobs(4, 5);
        let d = build_dendrogram(&f).unwrap();
        let n = f.len();
        let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for m in d.merges() {
            let (a, b) = (members[m.a].clone(), members[m.b].clone());
            let mut s = 0.0;
            for &i in &a {
                for &j in &b {
                    s += euclidean(&f.vectors()[i], &f.vectors()[j]);
                }
            }
            let brute = s / (a.len() * b.len()) as f64;
            assert!((brute - m.distance).abs() < 1e-9, "{brute} vs {}", m.distance);
            members.push(a.into_iter().chain(b).collect());
        }
    }

    #[test]
    fn rejects_bad_k() {
        let (f, _) = three_blobs(2, 0);
        assert!(agglomerative(&f, 0).is_err());
        assert!(agglomerative(&f, 7).is_err());
        let empty = FeatureSet::new(vec![], vec![]).unwrap();
        assert!(agglomerative(&empty, 1).is_err());
    }
}
