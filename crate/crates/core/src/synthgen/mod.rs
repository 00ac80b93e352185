//! Reproducible synthetic segmentation datasets with hidden latent classes.
//!
//! Each image holds one structure drawn from a class-specific shape family
//! (blob, ring, bar, striped square) over a smooth background. The mask marks
//! exactly the structure's pixels with its class value. The latent class is
//! kept off the training-facing API; evaluation code reads it through
//! [`Dataset::ground_truth`].

mod io;
mod pairs;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::Tensor;

pub use io::{load_dataset, save_dataset, SAMPLE_MAGIC};
pub use pairs::{pair_rates, positional_curve, PairRates, PairStrategy};

/// Generation parameters. Every field has a default; unknown keys are
/// rejected when read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub n_classes: usize,
    pub image_size: usize,
    /// How far apart class intensity profiles sit, in (0, 1].
    pub contrast: f32,
    /// Scale of per-sample jitter in position, size and intensity, in [0, 1].
    pub intra_class_variation: f32,
    pub noise_sigma: f32,
    /// Frequency ratio between the most and least common class (≥ 1).
    pub imbalance_ratio: f32,
    pub slices_per_volume: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 400,
            n_classes: 4,
            image_size: 32,
            contrast: 0.3,
            intra_class_variation: 0.5,
            noise_sigma: 0.05,
            imbalance_ratio: 2.0,
            slices_per_volume: 20,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(invalid(format!(
                "image_size {} < 16: the UNet needs two 2× downsamplings",
                self.image_size
            )));
        }
        if !self.image_size.is_multiple_of(4) {
            return Err(invalid(format!(
                "image_size {} is not a multiple of 4",
                self.image_size
            )));
        }
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(invalid(format!("n_classes {} outside [2, 255]", self.n_classes)));
        }
        if self.n_samples < self.n_classes {
            return Err(invalid("n_samples must be at least n_classes"));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(invalid(format!("contrast {} outside (0, 1]", self.contrast)));
        }
        if !(0.0..=1.0).contains(&self.intra_class_variation) {
            return Err(invalid("intra_class_variation outside [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid("noise_sigma must be finite and ≥ 0"));
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return Err(invalid("imbalance_ratio must be ≥ 1"));
        }
        if self.slices_per_volume == 0 {
            return Err(invalid("slices_per_volume must be ≥ 1"));
        }
        Ok(())
    }

    /// Samples per class (index 0 = class 1), by largest-remainder
    /// apportionment of geometric weights from `imbalance_ratio` down to 1.
    pub fn class_counts(&self) -> Vec<usize> {
        let c = self.n_classes;
        let weights: Vec<f64> = (0..c)
            .map(|k| (self.imbalance_ratio as f64).powf((c - 1 - k) as f64 / (c - 1) as f64))
            .collect();
        let total: f64 = weights.iter().sum();
        let quotas: Vec<f64> = weights.iter().map(|w| w / total * self.n_samples as f64).collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| {
            let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            fb.total_cmp(&fa).then(a.cmp(&b))
        });
        let missing = self.n_samples - counts.iter().sum::<usize>();
        for &k in order.iter().take(missing) {
            counts[k] += 1;
        }
        // every class is represented
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            let donor = (0..c).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();
            counts[donor] -= 1;
            counts[empty] += 1;
        }
        counts
    }
}

/// One image with its segmentation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Row-major `H×W` intensities in [0, 1].
    pub image: Vec<f32>,
    /// Row-major `H×W` labels in `0..=C`; 0 is background.
    pub mask: Vec<u8>,
    pub volume_id: Option<usize>,
    pub slice_index: Option<usize>,
    latent_class: u8,
}

impl Sample {
    pub(crate) fn new(
        id: usize,
        image: Vec<f32>,
        mask: Vec<u8>,
        latent_class: u8,
        volume_id: Option<usize>,
        slice_index: Option<usize>,
    ) -> Self {
        Self {
            id,
            image,
            mask,
            volume_id,
            slice_index,
            latent_class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    spec: DatasetSpec,
    samples: Vec<Sample>,
}

/// Evaluation-only access to latent classes.
#[derive(Clone, Copy)]
pub struct GroundTruth<'a> {
    dataset: &'a Dataset,
}

impl GroundTruth<'_> {
    /// Latent class (1-based) of the sample at `index`.
    pub fn class_at(&self, index: usize) -> u8 {
        self.dataset.samples[index].latent_class
    }

    /// Latent classes in sample order.
    pub fn classes(&self) -> Vec<u8> {
        self.dataset.samples.iter().map(|s| s.latent_class).collect()
    }
}

impl Dataset {
    pub(crate) fn from_parts(spec: DatasetSpec, samples: Vec<Sample>) -> Self {
        Self { spec, samples }
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn ground_truth(&self) -> GroundTruth<'_> {
        GroundTruth { dataset: self }
    }

    /// Samples at the given positions, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Images at the given positions stacked as `[n, 1, H, W]`.
    pub fn image_batch(&self, indices: &[usize]) -> Tensor<f32> {
        let h = self.image_size();
        let data = indices
            .iter()
            .flat_map(|&i| self.samples[i].image.iter().copied())
            .collect();
        Tensor::new(vec![indices.len(), 1, h, h], data).expect("sample images are H×W")
    }

    /// Masks at the given positions, concatenated row-major.
    pub fn mask_batch(&self, indices: &[usize]) -> Vec<u8> {
        indices
            .iter()
            .flat_map(|&i| self.samples[i].mask.iter().copied())
            .collect()
    }

    /// Same samples in a different order.
    pub fn permuted(&self, order: &[usize]) -> Dataset {
        assert_eq!(order.len(), self.len());
        self.select(order)
    }
}

/// Builds the dataset described by `spec`. A pure function of the spec.
///
/// Samples are arranged into synthetic volumes of `slices_per_volume`
/// consecutive slices; within a volume the latent class increases with
/// slice index, imitating anatomy drifting along an axis.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = spec.class_counts();
    let labels: Vec<u8> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &n)| std::iter::repeat_n(k as u8 + 1, n))
        .collect();
    let n_volumes = spec.n_samples.div_ceil(spec.slices_per_volume);
    let mut volumes: Vec<Vec<u8>> = vec![Vec::new(); n_volumes];
    for (i, &c) in labels.iter().enumerate() {
        volumes[i % n_volumes].push(c);
    }
    let mut samples = Vec::with_capacity(spec.n_samples);
    for (v, classes) in volumes.iter().enumerate() {
        for (s, &class) in classes.iter().enumerate() {
            let id = samples.len();
            let mut r = rng::stream(spec.seed, "synthgen", id as u64);
            let (image, mask) = render::render(spec, class, &mut r);
            samples.push(Sample::new(id, image, mask, class, Some(v), Some(s)));
        }
    }
    Ok(Dataset::from_parts(spec.clone(), samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(contrast: f32) -> DatasetSpec {
        DatasetSpec {
            n_samples: 80,
            contrast,
            seed: 3,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_dataset(&small(0.5)).unwrap();
        let b = generate_dataset(&small(0.5)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DatasetSpec { seed: 4, ..small(0.5) }).unwrap();
        assert_ne!(a.samples()[0].image, c.samples()[0].image);
    }

    #[test]
    fn cardinality_and_class_coverage() {
        let ds = generate_dataset(&DatasetSpec {
            n_samples: 400,
            n_classes: 4,
            ..DatasetSpec::default()
        })
        .unwrap();
        assert_eq!(ds.len(), 400);
        let mut classes = ds.ground_truth().classes();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes, vec![1, 2, 3, 4]);
    }

    #[test]
    fn masks_match_class_and_images_in_range() {
        let ds = generate_dataset(&small(1.0)).unwrap();
        let gt = ds.ground_truth();
        for (i, s) in ds.samples().iter().enumerate() {
            let c = gt.class_at(i);
            assert!(s.mask.iter().all(|&m| m == 0 || m == c));
            assert!(s.mask.contains(&c), "sample {i} has an empty structure");
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn small_images_rejected() {
        let spec = DatasetSpec {
            image_size: 12,
            ..DatasetSpec::default()
        };
        assert!(generate_dataset(&spec).is_err());
        let spec = DatasetSpec {
            n_classes: 1,
            ..DatasetSpec::default()
        };
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn imbalance_respected() {
        let spec = DatasetSpec {
            n_samples: 400,
            imbalance_ratio: 3.0,
            ..DatasetSpec::default()
        };
        let counts = spec.class_counts();
        assert_eq!(counts.iter().sum::<usize>(), 400);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        let ratio = counts[0] as f64 / counts[3] as f64;
        assert!((ratio - 3.0).abs() < 0.1, "{counts:?}");
        let balanced = DatasetSpec {
            imbalance_ratio: 1.0,
            ..spec
        };
        assert_eq!(balanced.class_counts(), vec![100; 4]);
    }

    #[test]
    fn class_drifts_along_slices() {
        let ds = generate_dataset(&small(0.5)).unwrap();
        let gt = ds.ground_truth();
        for w in ds.samples().windows(2).enumerate() {
            let (i, pair) = w;
            if pair[0].volume_id == pair[1].volume_id {
                assert!(gt.class_at(i) <= gt.class_at(i + 1));
            }
        }
    }

    fn mean_inter_class_distance(ds: &Dataset) -> f64 {
        let gt = ds.ground_truth();
        let (mut sum, mut n) = (0.0, 0usize);
        for i in 0..ds.len() {
            for j in i + 1..ds.len() {
                if gt.class_at(i) != gt.class_at(j) {
                    let d: f64 = ds.samples()[i]
                        .image
                        .iter()
                        .zip(&ds.samples()[j].image)
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum();
                    sum += d.sqrt();
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn contrast_separates_classes() {
        let hi = generate_dataset(&small(1.0)).unwrap();
        let lo = generate_dataset(&small(0.2)).unwrap();
        let (dh, dl) = (mean_inter_class_distance(&hi), mean_inter_class_distance(&lo));
        assert!(dh > dl, "high {dh} vs low {dl}");
    }
}
