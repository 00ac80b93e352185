//! Grouping of image features into pseudo-classes.

mod agglomerative;
mod dbscan;
mod elbow;
mod kmeans;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};

pub use agglomerative::{agglomerative, build_dendrogram, Dendrogram, Merge};
pub use dbscan::dbscan;
pub use elbow::{elbow_curve, elbow_curve_from, select_k, ElbowCurve};
pub use kmeans::{kmeans, KMeansFit};

/// Per-sample embedding vectors keyed by sample id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    ids: Vec<usize>,
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

impl FeatureSet {
    pub fn new(ids: Vec<usize>, vectors: Vec<Vec<f32>>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(invalid("ids and vectors differ in length"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(invalid(format!("duplicate sample id {dup}")));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(invalid("feature vectors differ in dimension"));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }
        Ok(Self { ids, dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Vec<f32>] {
        &self.vectors
    }

    pub fn get(&self, id: usize) -> Option<&[f32]> {
        self.ids
            .iter()
            .position(|&i| i == id)
            .map(|p| self.vectors[p].as_slice())
    }

    /// Same features in a different order.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            ids: order.iter().map(|&i| self.ids[i]).collect(),
            dim: self.dim,
            vectors: order.iter().map(|&i| self.vectors[i].clone()).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let raw: FeatureSet = serde_json::from_str(&text)?;
        Self::new(raw.ids, raw.vectors)
    }

    pub(crate) fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(invalid("empty feature set"))
        } else {
            Ok(())
        }
    }
}

pub(crate) fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Dense `n×n` Euclidean distance matrix.
pub(crate) fn distance_matrix(features: &FeatureSet) -> Vec<f64> {
    let n = features.len();
    let v = features.vectors();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let x = euclidean(&v[i], &v[j]);
            d[i * n + j] = x;
            d[j * n + i] = x;
        }
    }
    d
}

/// Renumbers labels `0..k` in order of first appearance.
pub(crate) fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    raw.iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Cluster index per sample id, plus the method that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLabels {
    pub method: String,
    pub params: serde_json::Value,
    pub k: usize,
    pub assignments: Vec<(usize, usize)>,
}

impl PseudoLabels {
    /// Validates that ids are unique and labels cover `0..k` with no empty
    /// cluster.
    pub fn new(method: &str, params: serde_json::Value, assignments: Vec<(usize, usize)>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(invalid("no assignments"));
        }
        let mut seen = HashSet::new();
        if let Some((dup, _)) = assignments.iter().find(|(id, _)| !seen.insert(*id)) {
            return Err(invalid(format!("sample id {dup} assigned twice")));
        }
        let k = assignments.iter().map(|&(_, l)| l).max().unwrap() + 1;
        let mut used = vec![false; k];
        assignments.iter().for_each(|&(_, l)| used[l] = true);
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(invalid(format!("cluster {empty} of {k} is empty")));
        }
        Ok(Self {
            method: method.to_string(),
            params,
            k,
            assignments,
        })
    }

    pub(crate) fn from_features(
        method: &str,
        params: serde_json::Value,
        features: &FeatureSet,
        labels: &[usize],
    ) -> Result<Self> {
        Self::new(
            method,
            params,
            features.ids().iter().copied().zip(labels.iter().copied()).collect(),
        )
    }

    /// Labels in assignment order.
    pub fn labels(&self) -> Vec<usize> {
        self.assignments.iter().map(|&(_, l)| l).collect()
    }

    pub fn label_map(&self) -> HashMap<usize, usize> {
        self.assignments.iter().copied().collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        self.assignments.iter().for_each(|&(_, l)| sizes[l] += 1);
        sizes
    }

    /// Checks every id in `ids` is labelled exactly once and nothing else is.
    pub fn covers(&self, ids: &[usize]) -> bool {
        let map = self.label_map();
        map.len() == ids.len() && ids.iter().all(|id| map.contains_key(id))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let raw: PseudoLabels = serde_json::from_str(&text)?;
        Self::new(&raw.method, raw.params, raw.assignments)
    }
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Returns 1.0 for identical partitions even in the degenerate cases where
/// the chance-corrected formula is 0/0.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let comb2 = |x: u64| x * x.saturating_sub(1) / 2;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: u64 = table.values().map(|&v| comb2(v)).sum();
    let sum_rows: u64 = rows.values().map(|&v| comb2(v)).sum();
    let sum_cols: u64 = cols.values().map(|&v| comb2(v)).sum();
    let total = comb2(n as u64) as f64;
    let expected = if total > 0.0 {
        sum_rows as f64 * sum_cols as f64 / total
    } else {
        0.0
    };
    let max_index = 0.5 * (sum_rows + sum_cols) as f64;
    let denom = max_index - expected;
    if denom == 0.0 {
        return if canonical_labels(a) == canonical_labels(b) {
            1.0
        } else {
            0.0
        };
    }
    (index as f64 - expected) / denom
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::FeatureSet;
    use crate::rng::{normal, stream};

    /// Three unit-variance 2-D Gaussian blobs whose centres are 10 apart.
    pub fn three_blobs(per_blob: usize, seed: u64) -> (FeatureSet, Vec<usize>) {
        let centers = [(0.0, 0.0), (10.0, 0.0), (5.0, 75f64.sqrt())];
        let mut rng = stream(seed, "blobs", 0);
        let mut vectors = Vec::new();
        let mut truth = Vec::new();
        for (b, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                vectors.push(vec![(cx + normal(&mut rng)) as f32, (cy + normal(&mut rng)) as f32]);
                truth.push(b);
            }
        }
        let ids = (0..vectors.len()).collect();
        (FeatureSet::new(ids, vectors).unwrap(), truth)
    }
}
