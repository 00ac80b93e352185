use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{report, vae_loss_on_tape, VaeLossReport, VaeModel};
use crate::clustering::FeatureSet;
use crate::error::{invalid, io_err, Error, Result};
use crate::nn::Adam;
use crate::rng::stream;
use crate::synthgen::Dataset;
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// Weight of a KL summed over latent dims against a reconstruction
    /// averaged over pixels.
    pub beta: f64,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 1e-3,
            batch: 32,
            beta: 5e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEpoch {
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeHistory {
    pub steps: Vec<VaeLossReport>,
    pub epochs: Vec<VaeEpoch>,
}

impl VaeHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,rec,kl,total\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{},{}", e.epoch, e.rec, e.kl, e.total).unwrap();
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_err(path))
    }
}

/// Minibatch Adam on `rec + β·kl`. Epoch values are sample-weighted means of
/// the step losses.
pub fn train_vae(model: &mut VaeModel, dataset: &Dataset, cfg: &VaeTrainConfig) -> Result<VaeHistory> {
    if dataset.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    if cfg.batch == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if dataset.image_size() != model.config().image_size {
        return Err(invalid(format!(
            "dataset images are {}², model expects {}²",
            dataset.image_size(),
            model.config().image_size
        )));
    }
    let mut opt = Adam::new(model.params());
    let mut history = VaeHistory::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, "vae.shuffle", epoch as u64));
        let mut sums = [0.0f64; 3];
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::<f32>::new();
            let vars = model.params().bind(&mut tape);
            let x = tape.constant(dataset.image_batch(chunk));
            let eps = model.sample_noise(chunk.len(), &mut stream(cfg.seed, "vae.noise", step as u64));
            let eps = tape.constant(eps);
            let out = model
                .forward_on_tape(&mut tape, &vars, x, eps)
                .map_err(|e| non_finite(e, step))?;
            let loss = vae_loss_on_tape(&mut tape, out.recon, x, out.mu, out.logvar, cfg.beta)
                .map_err(|e| non_finite(e, step))?;
            tape.backward(loss.total).map_err(|e| non_finite(e.into(), step))?;
            let r = report(&tape, &loss);
            model.params_mut().accumulate_grads(&tape, &vars);
            opt.step(model.params_mut(), cfg.lr);
            let w = chunk.len() as f64;
            sums[0] += r.rec * w;
            sums[1] += r.kl * w;
            sums[2] += r.total * w;
            history.steps.push(r);
            step += 1;
        }
        let n = dataset.len() as f64;
        history.epochs.push(VaeEpoch {
            epoch,
            rec: sums[0] / n,
            kl: sums[1] / n,
            total: sums[2] / n,
        });
    }
    Ok(history)
}

fn non_finite(e: Error, step: usize) -> Error {
    match e {
        Error::Tensor(crate::tensor::TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
            stage: "train-vae",
            step,
        },
        other => other,
    }
}

/// Posterior means `μ̂` keyed by sample id, computed without sampling.
pub fn extract_features(model: &VaeModel, dataset: &Dataset) -> Result<FeatureSet> {
    if dataset.image_size() != model.config().image_size {
        return Err(invalid("dataset image size differs from the model's"));
    }
    let d = model.config().latent_dim;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    let mut vectors = Vec::with_capacity(dataset.len());
    for chunk in idx.chunks(64) {
        let mut tape = Tape::<f32>::new();
        let vars = model.params().bind_frozen(&mut tape);
        let x = tape.constant(dataset.image_batch(chunk));
        let (mu, _) = model.encode(&mut tape, &vars, x)?;
        vectors.extend(tape.value(mu).data().chunks(d).map(<[f32]>::to_vec));
    }
    FeatureSet::new(dataset.ids(), vectors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, DatasetSpec, Sample};
    use crate::vae::VaeConfig;

    fn small() -> Dataset {
        generate_dataset(&DatasetSpec {
            n_samples: 24,
            image_size: 16,
            ..DatasetSpec::default()
        })
        .unwrap()
    }

    fn config16() -> VaeConfig {
        VaeConfig {
            image_size: 16,
            channels: (4, 8),
            latent_dim: 4,
        }
    }

    #[test]
    fn zero_epochs_is_noop() {
        let ds = small();
        let mut m = VaeModel::new(config16(), 0).unwrap();
        let before = m.params().clone();
        let h = train_vae(
            &mut m,
            &ds,
            &VaeTrainConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(h.epochs.is_empty() && h.steps.is_empty());
        assert_eq!(m.params(), &before);
    }

    #[test]
    fn beta_zero_total_is_rec() {
        let ds = small();
        let mut m = VaeModel::new(config16(), 0).unwrap();
        let cfg = VaeTrainConfig {
            epochs: 2,
            batch: 8,
            beta: 0.0,
            ..Default::default()
        };
        let h = train_vae(&mut m, &ds, &cfg).unwrap();
        assert_eq!(h.steps.len(), 6);
        assert!(h.steps.iter().all(|s| s.total == s.rec));
        assert!(h.to_csv().starts_with("epoch,rec,kl,total\n0,"));
    }

    #[test]
    fn features_are_deterministic_means() {
        let ds = small();
        let m = VaeModel::new(config16(), 1).unwrap();
        let s = &ds.samples()[0];
        let twin = Sample::new(999, s.image.clone(), s.mask.clone(), 1, None, None);
        let pair = Dataset::from_parts(ds.spec().clone(), vec![s.clone(), twin]);
        let f = extract_features(&m, &pair).unwrap();
        assert_eq!(f.vectors()[0], f.vectors()[1]);
        let all = extract_features(&m, &ds).unwrap();
        assert_eq!(all.len(), ds.len());
        assert_eq!(all.dim(), 4);
    }
}
