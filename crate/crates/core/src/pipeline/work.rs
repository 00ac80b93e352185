//! Stage computations shared by single-stage commands and the matrix.

use serde::{Deserialize, Serialize};

use super::config::{ClusterMethod, ClusterSpec, Config, KChoice};
use crate::checkpoint::Checkpoint;
use crate::clustering::{
    adjusted_rand_index, build_dendrogram, dbscan, distance_matrix, elbow_curve_from, kmeans, select_k, ElbowCurve,
    FeatureSet, PseudoLabels,
};
use crate::contrastive::{pretrain, EncoderModel, Mode, PretrainHistory};
use crate::error::{invalid, Result};
use crate::rng::derive_seed;
use crate::segmentation::{build_unet, evaluate, finetune, DiceReport, FinetuneHistory, UnetConfig, UnetModel};
use crate::synthgen::{generate_dataset, pair_rates, Dataset, DatasetSpec, PairRates, PairStrategy};
use crate::vae::{extract_features, train_vae, VaeHistory, VaeModel};

/// Generation parameters of the held-out test set.
pub fn test_spec(cfg: &Config) -> DatasetSpec {
    DatasetSpec {
        n_samples: cfg.test_samples,
        seed: derive_seed(cfg.dataset.seed, "generate.test", 0),
        ..cfg.dataset
    }
}

pub fn make_datasets(cfg: &Config) -> Result<(Dataset, Dataset)> {
    Ok((generate_dataset(&cfg.dataset)?, generate_dataset(&test_spec(cfg))?))
}

pub fn train_features(cfg: &Config, train: &Dataset, seed: u64) -> Result<(VaeModel, VaeHistory, FeatureSet)> {
    let mut model = VaeModel::new(cfg.vae.model_config(train.image_size()), seed)?;
    let history = train_vae(&mut model, train, &cfg.vae.train_config(seed))?;
    let features = extract_features(&model, train)?;
    Ok((model, history, features))
}

/// Pseudo-labels plus the elbow curve over `k_range` and the `k` it selects.
#[derive(Clone, Debug)]
pub struct Clustering {
    pub labels: PseudoLabels,
    /// Absent when fewer than three candidate `k` fit the sample count.
    pub elbow: Option<ElbowCurve>,
    pub elbow_k: Option<usize>,
}

/// 95th percentile of the distance from each point to its `min_points`-th
/// nearest point, counting the point itself, so nearly every point is core.
fn default_eps(features: &FeatureSet, min_points: usize) -> f64 {
    let n = features.len();
    let d = distance_matrix(features);
    let rank = min_points.min(n) - 1;
    let mut kth: Vec<f64> = (0..n)
        .map(|i| {
            let mut row = d[i * n..(i + 1) * n].to_vec();
            row.sort_by(f64::total_cmp);
            row[rank]
        })
        .collect();
    kth.sort_by(f64::total_cmp);
    let eps = kth[(n - 1) * 19 / 20];
    if eps > 0.0 {
        eps
    } else {
        f64::MIN_POSITIVE
    }
}

/// Clusters features per `spec`. `auto` always reads the agglomerative
/// elbow curve, whichever backend produces the labels.
pub fn cluster(spec: &ClusterSpec, features: &FeatureSet, seed: u64) -> Result<Clustering> {
    let n = features.len();
    let dendrogram = build_dendrogram(features)?;
    let (lo, hi) = spec.k_range;
    let ks: Vec<usize> = (lo..=hi.min(n)).collect();
    let elbow = if ks.len() >= 3 {
        Some(elbow_curve_from(&dendrogram, features, &ks)?)
    } else {
        None
    };
    let elbow_k = elbow.as_ref().map(select_k).transpose()?;
    let k = match spec.k {
        KChoice::Fixed(k) => k,
        KChoice::Auto => {
            elbow_k.ok_or_else(|| invalid(format!("k = auto needs ≥ 3 candidates in k_range for {n} samples")))?
        }
        KChoice::N => n,
    };
    let k_param = serde_json::json!({"k": k, "k_choice": spec.k});
    let labels = match spec.method {
        ClusterMethod::Agglomerative => {
            let raw = dendrogram.cut(k)?;
            let params = serde_json::json!({"k": k, "k_choice": spec.k, "linkage": "average", "metric": "euclidean"});
            PseudoLabels::from_features("agglomerative", params, features, &raw)?
        }
        ClusterMethod::Kmeans => {
            let mut fit = kmeans(features, k, seed, spec.max_iters)?.labels;
            fit.params = k_param;
            fit
        }
        ClusterMethod::Dbscan => {
            let eps = spec.eps.unwrap_or_else(|| default_eps(features, spec.min_points));
            let mut fit = dbscan(features, eps, spec.min_points)?;
            fit.params = serde_json::json!({"eps": eps, "min_points": spec.min_points});
            fit
        }
    };
    Ok(Clustering { labels, elbow, elbow_k })
}

/// Pseudo-label summary against the hidden latent classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub k: usize,
    pub sizes: Vec<usize>,
    pub ari: f64,
    pub instance_rates: PairRates,
    pub cluster_rates: PairRates,
}

pub fn cluster_stats(train: &Dataset, labels: &PseudoLabels) -> Result<ClusterStats> {
    let map = labels.label_map();
    let predicted: Vec<usize> = train.samples().iter().map(|s| map[&s.id]).collect();
    let truth: Vec<usize> = train.ground_truth().classes().into_iter().map(usize::from).collect();
    Ok(ClusterStats {
        k: labels.k,
        sizes: labels.cluster_sizes(),
        ari: adjusted_rand_index(&predicted, &truth),
        instance_rates: pair_rates(train, &PairStrategy::InstanceDiscrimination, None)?,
        cluster_rates: pair_rates(train, &PairStrategy::ClusterGuided, Some(labels))?,
    })
}

pub fn pretrain_encoder(
    cfg: &Config,
    train: &Dataset,
    mode: Mode,
    labels: Option<&PseudoLabels>,
    seed: u64,
) -> Result<(EncoderModel, PretrainHistory)> {
    let mut model = EncoderModel::new(cfg.unet_widths, cfg.contrastive.head, seed)?;
    let run = crate::contrastive::PretrainConfig {
        mode,
        ..cfg.contrastive
    };
    let history = pretrain(&mut model, train, labels, &run, seed)?;
    Ok((model, history))
}

pub fn unet_config(cfg: &Config) -> UnetConfig {
    UnetConfig {
        widths: cfg.unet_widths,
        n_classes: cfg.dataset.n_classes,
    }
}

/// Builds a UNet (encoder from `transfer` when given), fine-tunes it on
/// `fraction` of `train` and scores it on `test`.
pub fn finetune_and_evaluate(
    cfg: &Config,
    train: &Dataset,
    test: &Dataset,
    transfer: Option<&Checkpoint>,
    fraction: f64,
    seed: u64,
) -> Result<(UnetModel, FinetuneHistory, DiceReport)> {
    let mut model = build_unet(unet_config(cfg), transfer, seed)?;
    let history = finetune(&mut model, train, fraction, &cfg.finetune, seed)?;
    let mut report = evaluate(&model, test)?;
    report.fraction = fraction;
    report.seed = seed;
    Ok((model, history, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::testutil::three_blobs;

    #[test]
    fn every_backend_recovers_blobs() {
        let (f, truth) = three_blobs(20, 3);
        for method in [
            ClusterMethod::Agglomerative,
            ClusterMethod::Kmeans,
            ClusterMethod::Dbscan,
        ] {
            let spec = ClusterSpec {
                method,
                ..ClusterSpec::default()
            };
            let c = cluster(&spec, &f, 0).unwrap();
            assert_eq!(c.elbow_k, Some(3));
            assert_eq!(adjusted_rand_index(&c.labels.labels(), &truth), 1.0, "{method:?}");
        }
    }

    #[test]
    fn k_n_gives_singletons() {
        let (f, _) = three_blobs(4, 0);
        let spec = ClusterSpec {
            k: KChoice::N,
            k_range: (2, 5),
            ..ClusterSpec::default()
        };
        let c = cluster(&spec, &f, 0).unwrap();
        assert_eq!(c.labels.k, f.len());
    }

    #[test]
    fn test_set_differs_from_train_set() {
        let cfg = Config {
            dataset: DatasetSpec {
                n_samples: 8,
                image_size: 16,
                ..DatasetSpec::default()
            },
            test_samples: 8,
            ..Config::default()
        };
        let (a, b) = make_datasets(&cfg).unwrap();
        assert_ne!(a.samples()[0].image, b.samples()[0].image);
    }
}
