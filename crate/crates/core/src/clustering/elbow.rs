use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_dendrogram, distance_matrix, Dendrogram, FeatureSet};
use crate::error::{invalid, io_err, Result};

/// Mean intra-cluster pairwise distance for each cut size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub points: Vec<(usize, f64)>,
}

impl ElbowCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,mean_intra_distance\n");
        for (k, v) in &self.points {
            writeln!(out, "{k},{v}").unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn value_at(&self, k: usize) -> Option<f64> {
        self.points.iter().find(|p| p.0 == k).map(|p| p.1)
    }
}

/// Builds one dendrogram and evaluates every `k` in `ks` against it.
pub fn elbow_curve(features: &FeatureSet, ks: &[usize]) -> Result<ElbowCurve> {
    features.require_nonempty()?;
    let dendrogram = build_dendrogram(features)?;
    elbow_curve_from(&dendrogram, features, ks)
}

/// Evaluates cuts of an already-built dendrogram of `features`.
pub fn elbow_curve_from(dendrogram: &Dendrogram, features: &FeatureSet, ks: &[usize]) -> Result<ElbowCurve> {
    if ks.is_empty() {
        return Err(invalid("empty k range"));
    }
    let n = features.len();
    if dendrogram.n() != n {
        return Err(invalid("dendrogram does not match feature set"));
    }
    if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > n) {
        return Err(invalid(format!("k = {bad} outside [1, {n}]")));
    }
    let d = distance_matrix(features);
    let points = ks
        .iter()
        .map(|&k| {
            let labels = dendrogram.cut(k)?;
            let (mut sum, mut count) = (0.0, 0u64);
            for i in 0..n {
                for j in i + 1..n {
                    if labels[i] == labels[j] {
                        sum += d[i * n + j];
                        count += 1;
                    }
                }
            }
            Ok((k, if count == 0 { 0.0 } else { sum / count as f64 }))
        })
        .collect::<Result<_>>()?;
    Ok(ElbowCurve { points })
}

/// Knee of the curve: the interior point farthest from the chord joining the
/// endpoints, measured after scaling both axes to `[0, 1]`. Ties (within
/// 1e-12) go to the smallest k.
pub fn select_k(curve: &ElbowCurve) -> Result<usize> {
    let p = &curve.points;
    if p.len() < 3 {
        return Err(invalid(format!("knee selection needs ≥ 3 points, got {}", p.len())));
    }
    let span = |f: &dyn Fn(&(usize, f64)) -> f64| {
        let lo = p.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = p.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    };
    let (xlo, xs) = span(&|q| q.0 as f64);
    let (ylo, ys) = span(&|q| q.1);
    let norm = |q: &(usize, f64)| ((q.0 as f64 - xlo) / xs, (q.1 - ylo) / ys);
    let (x0, y0) = norm(&p[0]);
    let (x1, y1) = norm(&p[p.len() - 1]);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len = (dx * dx + dy * dy).sqrt();
    let mut best = (p[1].0, f64::NEG_INFINITY);
    for q in &p[1..p.len() - 1] {
        let (x, y) = norm(q);
        let dist = if len > 0.0 {
            (dy * (x - x0) - dx * (y - y0)).abs() / len
        } else {
            0.0
        };
        if dist > best.1 + 1e-12 {
            best = (q.0, dist);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::euclidean;
    use crate::clustering::testutil::three_blobs;

    fn curve(points: &[(usize, f64)]) -> ElbowCurve {
        ElbowCurve {
            points: points.to_vec(),
        }
    }

    #[test]
    fn hand_computed_knee() {
        assert_eq!(select_k(&curve(&[(1, 10.0), (2, 2.0), (3, 1.9), (4, 1.8)])).unwrap(), 2);
    }

    #[test]
    fn linear_curve_picks_smallest_interior() {
        assert_eq!(select_k(&curve(&[(1, 4.0), (2, 3.0), (3, 2.0), (4, 1.0)])).unwrap(), 2);
        assert!(select_k(&curve(&[(1, 4.0), (2, 3.0)])).is_err());
    }

    #[test]
    fn endpoints_are_exact() {
        let (f, _) = three_blobs(5, 9);
        let n = f.len();
        let c = elbow_curve(&f, &[1, n]).unwrap();
        assert_eq!(c.value_at(n), Some(0.0));
        let v = f.vectors();
        let (mut s, mut m) = (0.0, 0);
        for i in 0..n {
            for j in i + 1..n {
                s += euclidean(&v[i], &v[j]);
                m += 1;
            }
        }
        assert!((c.value_at(1).unwrap() - s / m as f64).abs() < 1e-12);
    }

    #[test]
    fn three_blob_elbow() {
        let (f, _) = three_blobs(20, 1);
        let ks: Vec<usize> = (1..=10).collect();
        let c = elbow_curve(&f, &ks).unwrap();
        let v = |k| c.value_at(k).unwrap();
        assert!(v(2) - v(3) > 3.0 * (v(3) - v(4)));
        assert_eq!(select_k(&c).unwrap(), 3);
    }

    #[test]
    fn csv_header() {
        let c = curve(&[(1, 2.5), (2, 0.0)]);
        assert_eq!(c.to_csv(), "k,mean_intra_distance\n1,2.5\n2,0\n");
    }

    #[test]
    fn empty_range_rejected() {
        let (f, _) = three_blobs(2, 0);
        assert!(elbow_curve(&f, &[]).is_err());
        assert!(elbow_curve(&f, &[0]).is_err());
    }
}
