//! Convolutional β-VAE whose posterior means serve as clustering features.

mod train;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, ConvTranspose2d, Linear, ParamSet};
use crate::rng::{normal, stream, Rng};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use train::{extract_features, train_vae, VaeEpoch, VaeHistory, VaeTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeConfig {
    pub image_size: usize,
    /// Channel widths of the two stride-2 conv blocks.
    pub channels: (usize, usize),
    pub latent_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: (16, 32),
            latent_dim: 16,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(invalid(format!(
                "vae image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.channels.0 == 0 || self.channels.1 == 0 || self.latent_dim == 0 {
            return Err(invalid("vae widths and latent_dim must be positive"));
        }
        Ok(())
    }

    fn flat_dim(&self) -> usize {
        let q = self.image_size / 4;
        self.channels.1 * q * q
    }
}

/// Encoder: two stride-2 conv blocks, flatten, linear heads for μ and
/// log-variance. Decoder mirrors it with transposed convolutions and ends in
/// a sigmoid.
#[derive(Clone, Debug)]
pub struct VaeModel {
    config: VaeConfig,
    params: ParamSet,
    enc1: Conv2d,
    enc2: Conv2d,
    mu: Linear,
    logvar: Linear,
    dec_fc: Linear,
    dec1: ConvTranspose2d,
    dec2: ConvTranspose2d,
}

/// Output of one reparameterized pass.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeOutput {
    pub recon: Tensor<f32>,
    pub mu: Tensor<f32>,
    pub logvar: Tensor<f32>,
    pub z: Tensor<f32>,
}

/// Vars of one reparameterized pass recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VaeVars {
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

impl VaeModel {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "vae.init", 0);
        let mut p = ParamSet::new();
        let (c1, c2) = config.channels;
        let d = config.latent_dim;
        let flat = config.flat_dim();
        let enc1 = Conv2d::new(&mut p, "enc1", 1, c1, 3, 2, 1, &mut rng);
        let enc2 = Conv2d::new(&mut p, "enc2", c1, c2, 3, 2, 1, &mut rng);
        let mu = Linear::with_gain(&mut p, "mu", flat, d, 0.5, &mut rng);
        let logvar = Linear::with_gain(&mut p, "logvar", flat, d, 0.1, &mut rng);
        let dec_fc = Linear::new(&mut p, "dec_fc", d, flat, &mut rng);
        let dec1 = ConvTranspose2d::new(&mut p, "dec1", c2, c1, 4, 2, 1, &mut rng);
        let dec2 = ConvTranspose2d::new(&mut p, "dec2", c1, 1, 4, 2, 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            enc1,
            enc2,
            mu,
            logvar,
            dec_fc,
            dec1,
            dec2,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces every parameter from a checkpoint of a model with the same
    /// configuration; nothing changes on error.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.params.load_named(ckpt.entries(), "")?;
        Ok(())
    }

    fn check_input<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<usize> {
        let s = tape.shape(x);
        let h = self.config.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != h {
            return Err(invalid(format!("vae expects [n, 1, {h}, {h}] input, got {s:?}")));
        }
        Ok(s[0])
    }

    /// Posterior mean and log-variance, each `[n, d]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let n = self.check_input(tape, x)?;
        let h = self.enc1.forward(tape, vars, x)?;
        let h = tape.relu(h)?;
        let h = self.enc2.forward(tape, vars, h)?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[n, self.config.flat_dim()])?;
        Ok((self.mu.forward(tape, vars, h)?, self.logvar.forward(tape, vars, h)?))
    }

    /// Image in `(0, 1)` of shape `[n, 1, H, W]` from latents `[n, d]`.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        let q = self.config.image_size / 4;
        let h = self.dec_fc.forward(tape, vars, z)?;
        let h = tape.relu(h)?;
        let h = tape.reshape(h, &[n, self.config.channels.1, q, q])?;
        let h = self.dec1.forward(tape, vars, h)?;
        let h = tape.relu(h)?;
        let h = self.dec2.forward(tape, vars, h)?;
        Ok(tape.sigmoid(h)?)
    }

    /// Full pass with externally supplied standard-normal noise `[n, d]`.
    pub fn forward_on_tape<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var, eps: Var) -> Result<VaeVars> {
        let (mu, logvar) = self.encode(tape, vars, x)?;
        let z = reparameterize(tape, mu, logvar, eps)?;
        let recon = self.decode(tape, vars, z)?;
        Ok(VaeVars { recon, mu, logvar, z })
    }

    /// Draws `n × d` noise from `rng`.
    pub fn sample_noise(&self, n: usize, rng: &mut Rng) -> Tensor<f32> {
        Tensor::from_fn(&[n, self.config.latent_dim], |_| normal(rng) as f32)
    }
}

/// `z = μ + exp(logvar / 2) ⊙ ε`.
pub fn reparameterize<T: Real>(tape: &mut Tape<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = tape.mul_scalar(logvar, T::from_f64_lossy(0.5))?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    Ok(tape.add(mu, noise)?)
}

/// Reparameterized forward pass in inference mode; noise comes from `rng`.
pub fn vae_forward(model: &VaeModel, images: &Tensor<f32>, rng: &mut Rng) -> Result<VaeOutput> {
    let mut tape = Tape::<f32>::new();
    let vars = model.params.bind_frozen(&mut tape);
    let x = tape.constant(images.clone());
    let n = tape.shape(x)[0];
    let eps = tape.constant(model.sample_noise(n, rng));
    let out = model.forward_on_tape(&mut tape, &vars, x, eps)?;
    Ok(VaeOutput {
        recon: tape.value(out.recon).clone(),
        mu: tape.value(out.mu).clone(),
        logvar: tape.value(out.logvar).clone(),
        z: tape.value(out.z).clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossReport {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
    pub beta_kl: f64,
}

/// Loss components recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub total: Var,
    pub rec: Var,
    pub kl: Var,
    pub beta_kl: Var,
}

/// `rec + β·kl` with `rec` the pixel MSE and `kl` the batch-mean Gaussian KL.
pub fn vae_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    recon: Var,
    target: Var,
    mu: Var,
    logvar: Var,
    beta: f64,
) -> Result<VaeLossVars> {
    if beta.is_nan() || beta < 0.0 {
        return Err(invalid(format!("β must be ≥ 0, got {beta}")));
    }
    if tape.shape(recon) != tape.shape(target) {
        return Err(invalid(format!(
            "recon {:?} and target {:?} differ in shape",
            tape.shape(recon),
            tape.shape(target)
        )));
    }
    if tape.shape(mu) != tape.shape(logvar) || tape.shape(mu).len() != 2 {
        return Err(invalid("mu and logvar must both be [n, d]"));
    }
    let n = tape.shape(mu)[0];
    let diff = tape.sub(recon, target)?;
    let sq = tape.square(diff)?;
    let rec = tape.mean(sq)?;
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -T::one())?;
    let s = tape.sum(c)?;
    let kl = tape.mul_scalar(s, T::from_f64_lossy(0.5 / n as f64))?;
    let beta_kl = tape.mul_scalar(kl, T::from_f64_lossy(beta))?;
    let total = tape.add(rec, beta_kl)?;
    Ok(VaeLossVars {
        total,
        rec,
        kl,
        beta_kl,
    })
}

/// Evaluates the loss on plain tensors.
pub fn vae_loss(
    recon: &Tensor<f32>,
    target: &Tensor<f32>,
    mu: &Tensor<f32>,
    logvar: &Tensor<f32>,
    beta: f64,
) -> Result<VaeLossReport> {
    let mut tape = Tape::<f64>::new();
    let r = tape.constant(recon.cast());
    let t = tape.constant(target.cast());
    let m = tape.constant(mu.cast());
    let l = tape.constant(logvar.cast());
    let v = vae_loss_on_tape(&mut tape, r, t, m, l, beta)?;
    Ok(report(&tape, &v))
}

pub(crate) fn report<T: Real>(tape: &Tape<T>, v: &VaeLossVars) -> VaeLossReport {
    VaeLossReport {
        total: tape.item(v.total).as_f64(),
        rec: tape.item(v.rec).as_f64(),
        kl: tape.item(v.kl).as_f64(),
        beta_kl: tape.item(v.beta_kl).as_f64(),
    }
}
