use std::collections::VecDeque;

use super::{canonical_labels, distance_matrix, FeatureSet, PseudoLabels};
use crate::error::{invalid, Result};

/// Density clustering. A point is core when at least `min_points` points,
/// itself included, lie within `eps`.
///
/// Noise points take the label of their nearest clustered point, so every
/// sample ends up labelled. If nothing is dense, everything is cluster 0.
pub fn dbscan(features: &FeatureSet, eps: f64, min_points: usize) -> Result<PseudoLabels> {
    features.require_nonempty()?;
    if !eps.is_finite() || eps <= 0.0 {
        return Err(invalid(format!("dbscan eps must be positive, got {eps}")));
    }
    if min_points == 0 {
        return Err(invalid("dbscan min_points must be ≥ 1"));
    }
    let n = features.len();
    let d = distance_matrix(features);
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| d[i * n + j] <= eps).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_points).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if label[start].is_some() || !core[start] {
            continue;
        }
        label[start] = Some(next);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            if !core[p] {
                continue;
            }
            for &q in &neighbours[p] {
                if label[q].is_none() {
                    label[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }

    let raw: Vec<usize> = if next == 0 {
        vec![0; n]
    } else {
        (0..n)
            .map(|i| {
                label[i].unwrap_or_else(|| {
                    let nearest = (0..n)
                        .filter(|&j| label[j].is_some())
                        .min_by(|&a, &b| d[i * n + a].total_cmp(&d[i * n + b]))
                        .unwrap();
                    label[nearest].unwrap()
                })
            })
            .collect()
    };
    let params = serde_json::json!({"eps": eps, "min_points": min_points});
    PseudoLabels::from_features("dbscan", params, features, &canonical_labels(&raw))
}
