//! UNet segmentation: architecture, encoder transfer, fine-tuning, Dice.

mod finetune;
mod unet;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::synthgen::Dataset;
use crate::tensor::{Real, Tape, Tensor, Var};

pub use finetune::{finetune, labeled_subset, split_validation, FinetuneConfig, FinetuneEpoch, FinetuneHistory};
pub use unet::{argmax_channels, build_unet, EncoderFeatures, UnetConfig, UnetEncoder, UnetModel, ENCODER_PREFIX};

/// Smoothing constant of the soft Dice term.
pub const SOFT_DICE_EPS: f64 = 1.0;

/// `2|P∩T| / (|P| + |T|)` for label `class`; 1.0 when both sets are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let (inter, p, t) = overlap(pred, truth, class);
    Ok(dice_from_counts(inter, p, t))
}

fn overlap(pred: &[u8], truth: &[u8], class: u8) -> (u64, u64, u64) {
    let mut c = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(truth) {
        let (pa, tb) = (a == class, b == class);
        c.0 += u64::from(pa && tb);
        c.1 += u64::from(pa);
        c.2 += u64::from(tb);
    }
    c
}

fn dice_from_counts(inter: u64, p: u64, t: u64) -> f64 {
    if p + t == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + t) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    /// Foreground class (1-based) to Dice.
    pub per_class: BTreeMap<u8, f64>,
    pub mean: f64,
    pub fraction: f64,
    pub seed: u64,
}

impl DiceReport {
    /// Micro-averaged report from flat predicted and true masks.
    pub fn from_masks(pred: &[u8], truth: &[u8], n_classes: usize) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(invalid("mask lengths differ"));
        }
        let per_class: BTreeMap<u8, f64> = (1..=n_classes as u8)
            .map(|c| {
                let (i, p, t) = overlap(pred, truth, c);
                (c, dice_from_counts(i, p, t))
            })
            .collect();
        let mean = per_class.values().sum::<f64>() / n_classes as f64;
        Ok(Self {
            per_class,
            mean,
            fraction: 1.0,
            seed: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Argmax predictions over `dataset`, micro-averaged per class.
pub fn evaluate(model: &UnetModel, dataset: &Dataset) -> Result<DiceReport> {
    if dataset.is_empty() {
        return Err(invalid("cannot evaluate on an empty test set"));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut pred = Vec::with_capacity(dataset.len() * dataset.image_size().pow(2));
    for chunk in idx.chunks(32) {
        pred.extend(model.predict(&dataset.image_batch(chunk))?);
    }
    DiceReport::from_masks(&pred, &dataset.mask_batch(&idx), model.config().n_classes)
}

/// One-hot encoding of flat masks as `[n, C+1, H, W]`.
pub fn one_hot<T: Real>(masks: &[u8], n: usize, channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let p = h * w;
    if masks.len() != n * p {
        return Err(invalid("mask length does not match batch shape"));
    }
    if let Some(&bad) = masks.iter().find(|&&m| m as usize >= channels) {
        return Err(invalid(format!("mask label {bad} outside 0..{channels}")));
    }
    let mut data = vec![T::zero(); n * channels * p];
    for i in 0..n {
        for px in 0..p {
            data[(i * channels + masks[i * p + px] as usize) * p + px] = T::one();
        }
    }
    Ok(Tensor::new(vec![n, channels, h, w], data)?)
}

/// `1 − mean_c soft-Dice(probs_c, target_c)` over foreground channels
/// `1..C+1`, with [`SOFT_DICE_EPS`] smoothing.
pub fn soft_dice_loss_on_tape<T: Real>(tape: &mut Tape<T>, probs: Var, target: Var) -> Result<Var> {
    let channels = tape.shape(probs)[1];
    if channels < 2 {
        return Err(invalid("soft Dice needs a foreground channel"));
    }
    let eps = T::from_f64_lossy(SOFT_DICE_EPS);
    let py = tape.mul(probs, target)?;
    let inter = tape.sum_except(py, 1)?;
    let psum = tape.sum_except(probs, 1)?;
    let ysum = tape.sum_except(target, 1)?;
    let num = tape.mul_scalar(inter, T::from_f64_lossy(2.0))?;
    let num = tape.add_scalar(num, eps)?;
    let den = tape.add(psum, ysum)?;
    let den = tape.add_scalar(den, eps)?;
    let dice = tape.div(num, den)?;
    let w = T::from_f64_lossy(1.0 / (channels - 1) as f64);
    let weights = Tensor::from_fn(&[channels], |c| if c == 0 { T::zero() } else { w });
    let weights = tape.constant(weights);
    let fg = tape.mul(dice, weights)?;
    let mean = tape.sum(fg)?;
    let neg = tape.neg(mean)?;
    Ok(tape.add_scalar(neg, T::one())?)
}

/// Pixelwise cross-entropy plus soft-Dice loss, equally weighted.
pub fn segmentation_loss_on_tape<T: Real>(tape: &mut Tape<T>, logits: Var, target: Var) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if s.len() != 4 || tape.shape(target) != s.as_slice() {
        return Err(invalid("logits and one-hot target must share a [n, C+1, H, W] shape"));
    }
    let pixels = (s[0] * s[2] * s[3]) as f64;
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(logp, target)?;
    let total = tape.sum(picked)?;
    let ce = tape.mul_scalar(total, T::from_f64_lossy(-1.0 / pixels))?;
    let probs = tape.softmax(logits, 1)?;
    let dice = soft_dice_loss_on_tape(tape, probs, target)?;
    Ok(tape.add(ce, dice)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_many;

    #[test]
    fn dice_closed_forms() {
        let mut truth = vec![0u8; 200];
        truth[..100].iter_mut().for_each(|v| *v = 1);
        let mut pred = vec![0u8; 200];
        pred[..50].iter_mut().for_each(|v| *v = 1);
        assert!((dice_score(&pred, &truth, 1).unwrap() - 2.0 * 50.0 / 150.0).abs() < 1e-15);
        assert_eq!(dice_score(&truth, &truth, 1).unwrap(), 1.0);
        let disjoint: Vec<u8> = truth.iter().map(|&v| 1 - v).collect();
        assert_eq!(dice_score(&disjoint, &truth, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 3).unwrap(), 1.0);
        assert!(dice_score(&[0], &[0, 0], 1).is_err());
    }

    #[test]
    fn dice_is_symmetric() {
        let a = [0u8, 1, 1, 2, 2, 2, 1];
        let b = [1u8, 1, 0, 2, 1, 2, 2];
        for c in 0..3 {
            assert_eq!(dice_score(&a, &b, c).unwrap(), dice_score(&b, &a, c).unwrap());
        }
    }

    #[test]
    fn background_only_predictor_scores_zero() {
        let truth = [0u8, 1, 2, 2];
        let r = DiceReport::from_masks(&[0; 4], &truth, 2).unwrap();
        assert_eq!(r.per_class[&1], 0.0);
        assert_eq!(r.per_class[&2], 0.0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json["per_class"]["1"].is_number());
    }

    #[test]
    fn soft_dice_is_zero_at_perfect_prediction() {
        let masks = [0u8, 1, 2, 1, 0, 0, 2, 2];
        let y = one_hot::<f64>(&masks, 2, 3, 2, 2).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(y.clone());
        let t = tape.constant(y);
        let l = soft_dice_loss_on_tape(&mut tape, p, t).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let masks: Vec<u8> = (0..2 * 64).map(|i| ((i * 7) % 3) as u8).collect();
        let y = one_hot::<f64>(&masks, 2, 3, 8, 8).unwrap();
        let logits = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |i| ((i * 13) % 17) as f64 / 8.0 - 1.0);
        let err = finite_diff_check_many(
            |tape, v| {
                let t = tape.constant(y.clone());
                segmentation_loss_on_tape(tape, v[0], t)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
