use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{evaluate, one_hot, segmentation_loss_on_tape, UnetModel};
use crate::error::{invalid, Error, Result};
use crate::nn::{cosine_lr, Adam};
use crate::rng::stream;
use crate::synthgen::Dataset;
use crate::tensor::{Tape, TensorError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub fractions: Vec<f64>,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Share of the labeled subset held out for best-epoch selection.
    pub val_fraction: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.1],
            epochs: 40,
            lr: 1e-3,
            batch: 8,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneHistory {
    pub epochs: Vec<FinetuneEpoch>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub train_size: usize,
    pub val_size: usize,
}

/// Positions of a class-stratified labeled subset: `round(fraction · n_c)`
/// samples of each latent class, ascending.
pub fn labeled_subset(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("annotation fraction {fraction} outside (0, 1]")));
    }
    let gt = dataset.ground_truth();
    let mut by_class: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for i in 0..dataset.len() {
        by_class.entry(gt.class_at(i)).or_default().push(i);
    }
    let mut picked = Vec::new();
    for (class, mut members) in by_class {
        let take = (fraction * members.len() as f64).round() as usize;
        members.shuffle(&mut stream(seed, "finetune.subset", class as u64));
        picked.extend_from_slice(&members[..take.min(members.len())]);
    }
    if picked.is_empty() {
        return Err(invalid(format!("annotation fraction {fraction} selects no samples")));
    }
    picked.sort_unstable();
    Ok(picked)
}

/// Splits `subset` into (train, validation). With a single sample both sides
/// are that sample.
pub fn split_validation(subset: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    if subset.len() < 2 {
        return (subset.to_vec(), subset.to_vec());
    }
    let mut s = subset.to_vec();
    s.shuffle(&mut stream(seed, "finetune.val", 0));
    let n_val = ((val_fraction * s.len() as f64).round() as usize).clamp(1, s.len() - 1);
    let (val, train) = s.split_at(n_val);
    let (mut train, mut val) = (train.to_vec(), val.to_vec());
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Trains on the labeled subset with cosine-decayed Adam and keeps the
/// parameters of the epoch with the best validation Dice (earliest on ties).
pub fn finetune(
    model: &mut UnetModel,
    train: &Dataset,
    fraction: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneHistory> {
    if cfg.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let subset = labeled_subset(train, fraction, seed)?;
    let (tr, val) = split_validation(&subset, cfg.val_fraction, seed);
    let val_set = train.select(&val);
    let mut history = FinetuneHistory {
        train_size: tr.len(),
        val_size: val.len(),
        ..Default::default()
    };
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let channels = model.config().n_classes + 1;
    let h = train.image_size();
    let steps_per_epoch = tr.len().div_ceil(cfg.batch);
    let total_steps = cfg.epochs * steps_per_epoch;
    let mut opt = Adam::new(model.params());
    let mut best: Option<(f64, usize, crate::nn::ParamSet)> = None;
    let mut order = tr.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(seed, "finetune.shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::<f32>::new();
            let vars = model.params().bind(&mut tape);
            let x = tape.constant(train.image_batch(chunk));
            let y = tape.constant(one_hot(&train.mask_batch(chunk), chunk.len(), channels, h, h)?);
            let logits = model.forward(&mut tape, &vars, x).map_err(|e| non_finite(e, step))?;
            let loss = segmentation_loss_on_tape(&mut tape, logits, y).map_err(|e| non_finite(e, step))?;
            tape.backward(loss).map_err(|e| non_finite(e.into(), step))?;
            loss_sum += tape.item(loss) as f64 * chunk.len() as f64;
            model.params_mut().accumulate_grads(&tape, &vars);
            opt.step(model.params_mut(), cosine_lr(cfg.lr, step, total_steps));
            step += 1;
        }
        let val_dice = evaluate(model, &val_set)?.mean;
        history.epochs.push(FinetuneEpoch {
            epoch,
            train_loss: loss_sum / tr.len() as f64,
            val_dice,
        });
        if best.as_ref().is_none_or(|(d, _, _)| val_dice > *d) {
            best = Some((val_dice, epoch, model.params().clone()));
        }
    }
    if let Some((_, epoch, params)) = best {
        *model.params_mut() = params;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}

fn non_finite(e: Error, step: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            stage: "finetune",
            step,
        },
        other => other,
    }
}
