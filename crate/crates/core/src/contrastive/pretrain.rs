use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::augment::augment_pair;
use super::loss::{contrastive_loss_on_tape, instance_labels, Denominator, LossOptions};
use super::model::{EncoderModel, HeadConfig};
use super::sampler::epoch_batches;
use crate::clustering::PseudoLabels;
use crate::error::{invalid, io_err, Error, Result};
use crate::nn::{cosine_lr, Adam};
use crate::rng::{derive_seed, stream};
use crate::synthgen::Dataset;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Positives share a pseudo-label.
    #[default]
    Ufc,
    /// Positives are the two views of one image.
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub mode: Mode,
    pub tau: f64,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub include_self: bool,
    pub denominator: Denominator,
    pub head: HeadConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let loss = LossOptions::default();
        Self {
            mode: Mode::Ufc,
            tau: loss.tau,
            epochs: 40,
            lr: 2.5e-4,
            batch: 16,
            include_self: loss.include_self,
            denominator: loss.denominator,
            head: HeadConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            tau: self.tau,
            include_self: self.include_self,
            denominator: self.denominator,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainHistory {
    pub steps: Vec<f64>,
    /// `(epoch, mean loss)`, weighted by batch size.
    pub epochs: Vec<(usize, f64)>,
}

impl PretrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (e, l) in &self.epochs {
            writeln!(out, "{e},{l}").unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Pseudo-label of each dataset position, or the position itself in
/// instance mode.
fn position_labels(dataset: &Dataset, mode: Mode, labels: Option<&PseudoLabels>) -> Result<Vec<usize>> {
    match mode {
        Mode::Instance => Ok((0..dataset.len()).collect()),
        Mode::Ufc => {
            let labels = labels.ok_or_else(|| invalid("ufc mode needs pseudo-labels"))?;
            if !labels.covers(&dataset.ids()) {
                return Err(invalid("pseudo-labels do not cover the dataset exactly"));
            }
            let map = labels.label_map();
            Ok(dataset.samples().iter().map(|s| map[&s.id]).collect())
        }
    }
}

/// Two augmented views per image stacked as `[2b, 1, H, W]`: all first
/// views, then all second views.
fn view_batch(dataset: &Dataset, batch: &[usize], step_seed: u64) -> Tensor<f32> {
    let h = dataset.image_size();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for &i in batch {
        let s = &dataset.samples()[i];
        let (a, b) = augment_pair(&s.image, h, &mut stream(step_seed, "augment", s.id as u64));
        first.extend(a);
        second.extend(b);
    }
    first.extend(second);
    Tensor::new(vec![2 * batch.len(), 1, h, h], first).expect("views are H×W")
}

/// Contrastive pretraining with cosine-decayed Adam.
pub fn pretrain(
    model: &mut EncoderModel,
    dataset: &Dataset,
    labels: Option<&PseudoLabels>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainHistory> {
    let per_position = position_labels(dataset, cfg.mode, labels)?;
    let opts = cfg.loss_options();
    let mut history = PretrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let plan: Vec<Vec<Vec<usize>>> = (0..cfg.epochs)
        .map(|e| epoch_batches(&per_position, cfg.batch, seed, e))
        .collect::<Result<_>>()?;
    let total_steps: usize = plan.iter().map(Vec::len).sum();
    let mut opt = Adam::new(model.params());
    let mut step = 0;
    for (epoch, batches) in plan.iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0;
        for batch in batches {
            let feature_labels: Vec<usize> = match cfg.mode {
                Mode::Instance => instance_labels(2 * batch.len()),
                Mode::Ufc => batch.iter().chain(batch).map(|&i| per_position[i]).collect(),
            };
            let step_seed = derive_seed(seed, "pretrain.step", step as u64);
            let mut tape = Tape::<f32>::new();
            let vars = model.params().bind(&mut tape);
            let x = tape.constant(view_batch(dataset, batch, step_seed));
            let f = model.forward(&mut tape, &vars, x).map_err(|e| non_finite(e, step))?;
            let loss =
                contrastive_loss_on_tape(&mut tape, f, &feature_labels, &opts).map_err(|e| non_finite(e, step))?;
            tape.backward(loss).map_err(|e| non_finite(e.into(), step))?;
            let value = tape.item(loss) as f64;
            model.params_mut().accumulate_grads(&tape, &vars);
            opt.step(model.params_mut(), cosine_lr(cfg.lr, step, total_steps));
            history.steps.push(value);
            sum += value * batch.len() as f64;
            count += batch.len();
            step += 1;
        }
        history.epochs.push((epoch, sum / count as f64));
    }
    Ok(history)
}

fn non_finite(e: Error, step: usize) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            stage: "pretrain",
            step,
        },
        other => other,
    }
}
