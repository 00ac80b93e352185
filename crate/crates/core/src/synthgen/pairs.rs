//! Harmful-pair accounting for positive/negative selection strategies.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::clustering::PseudoLabels;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum PairStrategy {
    /// Only the two views of one image are positives; all other images are
    /// negatives.
    InstanceDiscrimination,
    /// Volumes are split into `partitions` equal slabs along the slice index;
    /// slices in the same slab are positives, others negatives.
    Positional { partitions: usize },
    /// Images sharing a pseudo-label are positives.
    ClusterGuided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRates {
    /// Fraction of negative pairs whose members share a latent class.
    pub harmful_negative_rate: f64,
    /// Fraction of positive pairs whose members differ in latent class.
    pub harmful_positive_rate: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts harmful pairs exhaustively over all ordered pairs `(i, j)`, `i ≠ j`.
///
/// The two augmented views of each image always form one positive pair,
/// which is never harmful.
pub fn pair_rates(dataset: &Dataset, strategy: &PairStrategy, assignments: Option<&PseudoLabels>) -> Result<PairRates> {
    let n = dataset.len();
    let classes = dataset.ground_truth().classes();
    let group: Vec<Option<usize>> = match strategy {
        PairStrategy::InstanceDiscrimination => vec![None; n],
        PairStrategy::ClusterGuided => {
            let labels = assignments.ok_or_else(|| invalid("cluster_guided needs pseudo-label assignments"))?;
            let map: HashMap<usize, usize> = labels.assignments.iter().copied().collect();
            dataset
                .samples()
                .iter()
                .map(|s| {
                    map.get(&s.id)
                        .copied()
                        .map(Some)
                        .ok_or_else(|| invalid(format!("sample {} has no pseudo-label", s.id)))
                })
                .collect::<Result<_>>()?
        }
        PairStrategy::Positional { partitions } => {
            if *partitions == 0 {
                return Err(invalid("positional strategy needs ≥ 1 partition"));
            }
            let mut volume_len: HashMap<usize, usize> = HashMap::new();
            for s in dataset.samples() {
                let v = s
                    .volume_id
                    .ok_or_else(|| invalid("positional strategy needs volume ids"))?;
                *volume_len.entry(v).or_default() += 1;
            }
            dataset
                .samples()
                .iter()
                .map(|s| {
                    let slice = s
                        .slice_index
                        .ok_or_else(|| invalid("positional strategy needs slice indices"))?;
                    let len = volume_len[&s.volume_id.unwrap()];
                    Ok(Some(slice * partitions / len))
                })
                .collect::<Result<_>>()?
        }
    };

    let (mut pos, mut harmful_pos, mut neg, mut harmful_neg) = (n as u64, 0u64, 0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let same_class = classes[i] == classes[j];
            let positive = matches!((group[i], group[j]), (Some(a), Some(b)) if a == b);
            if positive {
                pos += 1;
                harmful_pos += u64::from(!same_class);
            } else {
                neg += 1;
                harmful_neg += u64::from(same_class);
            }
        }
    }
    Ok(PairRates {
        harmful_negative_rate: ratio(harmful_neg, neg),
        harmful_positive_rate: ratio(harmful_pos, pos),
    })
}

/// Harmful rates of the positional strategy for each partition count.
pub fn positional_curve(dataset: &Dataset, partitions: &[usize]) -> Result<Vec<(usize, PairRates)>> {
    partitions
        .iter()
        .map(|&p| {
            Ok((
                p,
                pair_rates(dataset, &PairStrategy::Positional { partitions: p }, None)?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, DatasetSpec};

    fn labels_from(ds: &Dataset, labels: Vec<usize>) -> PseudoLabels {
        PseudoLabels::new(
            "test",
            serde_json::json!({}),
            ds.ids().into_iter().zip(labels).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_class_instance_discrimination_is_all_harmful() {
        let spec = DatasetSpec {
            n_samples: 30,
            n_classes: 2,
            imbalance_ratio: 1.0,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        let gt = ds.ground_truth();
        let ones: Vec<usize> = (0..ds.len()).filter(|&i| gt.class_at(i) == 1).collect();
        let same = ds.select(&ones);
        let r = pair_rates(&same, &PairStrategy::InstanceDiscrimination, None).unwrap();
        assert_eq!(r.harmful_negative_rate, 1.0);
        assert_eq!(r.harmful_positive_rate, 0.0);
    }

    #[test]
    fn perfect_clustering_is_harmless() {
        let ds = generate_dataset(&DatasetSpec {
            n_samples: 60,
            ..DatasetSpec::default()
        })
        .unwrap();
        let truth: Vec<usize> = ds.ground_truth().classes().iter().map(|&c| c as usize - 1).collect();
        let labels = labels_from(&ds, truth);
        let r = pair_rates(&ds, &PairStrategy::ClusterGuided, Some(&labels)).unwrap();
        assert_eq!(r.harmful_negative_rate, 0.0);
        assert_eq!(r.harmful_positive_rate, 0.0);
        assert!(pair_rates(&ds, &PairStrategy::ClusterGuided, None).is_err());
    }

    #[test]
    fn instance_rate_matches_pair_count_oracle() {
        for (n, c) in [(40usize, 4usize), (60, 3), (100, 5)] {
            let ds = generate_dataset(&DatasetSpec {
                n_samples: n,
                n_classes: c,
                imbalance_ratio: 1.0,
                ..DatasetSpec::default()
            })
            .unwrap();
            let r = pair_rates(&ds, &PairStrategy::InstanceDiscrimination, None).unwrap();
            let m = (n / c) as f64;
            assert_eq!(r.harmful_negative_rate, (m - 1.0) / (n as f64 - 1.0));
        }
    }

    #[test]
    fn instance_rate_is_order_invariant() {
        let ds = generate_dataset(&DatasetSpec {
            n_samples: 50,
            ..DatasetSpec::default()
        })
        .unwrap();
        let rev: Vec<usize> = (0..ds.len()).rev().collect();
        let a = pair_rates(&ds, &PairStrategy::InstanceDiscrimination, None).unwrap();
        let b = pair_rates(&ds.permuted(&rev), &PairStrategy::InstanceDiscrimination, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positional_curve_reports_each_partition_count() {
        let ds = generate_dataset(&DatasetSpec {
            n_samples: 80,
            ..DatasetSpec::default()
        })
        .unwrap();
        let curve = positional_curve(&ds, &[1, 2, 4, 8]).unwrap();
        assert_eq!(curve.len(), 4);
        // one partition: every pair is positive
        assert_eq!(curve[0].1.harmful_negative_rate, 0.0);
        for (_, r) in &curve {
            assert!((0.0..=1.0).contains(&r.harmful_negative_rate));
            assert!((0.0..=1.0).contains(&r.harmful_positive_rate));
        }
    }
}
