use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamSet};
use crate::rng::{stream, Rng};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Name prefix shared by every encoder parameter.
pub const ENCODER_PREFIX: &str = "enc.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnetConfig {
    /// Channels of the two pooled blocks and the bottleneck.
    pub widths: (usize, usize, usize),
    /// Foreground classes; the network predicts `n_classes + 1` channels.
    pub n_classes: usize,
}

impl Default for UnetConfig {
    fn default() -> Self {
        Self {
            widths: (16, 32, 64),
            n_classes: 4,
        }
    }
}

impl UnetConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.widths;
        if a == 0 || b == 0 || c == 0 {
            return Err(invalid("unet widths must be positive"));
        }
        if self.n_classes == 0 {
            return Err(invalid("unet needs at least one foreground class"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self {
            a: Conv2d::new(params, &format!("{name}.conv1"), cin, cout, 3, 1, 1, rng),
            b: Conv2d::new(params, &format!("{name}.conv2"), cout, cout, 3, 1, 1, rng),
        }
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let h = self.a.forward(tape, vars, x)?;
        let h = tape.relu(h)?;
        let h = self.b.forward(tape, vars, h)?;
        Ok(tape.relu(h)?)
    }
}

/// Downsampling path: two pooled double-conv blocks and a bottleneck.
#[derive(Clone, Debug)]
pub struct UnetEncoder {
    block1: DoubleConv,
    block2: DoubleConv,
    bottleneck: DoubleConv,
    width: usize,
}

/// Activations the decoder consumes.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub skip1: Var,
    pub skip2: Var,
    pub bottleneck: Var,
}

impl UnetEncoder {
    /// Registers parameters under [`ENCODER_PREFIX`].
    pub fn new(params: &mut ParamSet, widths: (usize, usize, usize), rng: &mut Rng) -> Self {
        let (w1, w2, w3) = widths;
        Self {
            block1: DoubleConv::new(params, "enc.block1", 1, w1, rng),
            block2: DoubleConv::new(params, "enc.block2", w1, w2, rng),
            bottleneck: DoubleConv::new(params, "enc.bottleneck", w2, w3, rng),
            width: w3,
        }
    }

    /// Channel count of the bottleneck output.
    pub fn out_channels(&self) -> usize {
        self.width
    }

    /// `x`: `[n, 1, H, W]` with `H`, `W` divisible by 4.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<EncoderFeatures> {
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != 1 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) || s[2] == 0 || s[3] == 0 {
            return Err(invalid(format!("encoder expects [n, 1, 4a, 4b] input, got {s:?}")));
        }
        let skip1 = self.block1.forward(tape, vars, x)?;
        let h = tape.max_pool2(skip1)?;
        let skip2 = self.block2.forward(tape, vars, h)?;
        let h = tape.max_pool2(skip2)?;
        let bottleneck = self.bottleneck.forward(tape, vars, h)?;
        Ok(EncoderFeatures {
            skip1,
            skip2,
            bottleneck,
        })
    }
}

/// Depth-2 UNet with skip concatenations and a 1×1 classifier.
#[derive(Clone, Debug)]
pub struct UnetModel {
    config: UnetConfig,
    params: ParamSet,
    encoder: UnetEncoder,
    up1: ConvTranspose2d,
    dec1: DoubleConv,
    up2: ConvTranspose2d,
    dec2: DoubleConv,
    head: Conv2d,
}

impl UnetModel {
    pub fn config(&self) -> &UnetConfig {
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

    /// Logits `[n, C+1, H, W]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let f = self.encoder.forward(tape, vars, x)?;
        let u = self.up1.forward(tape, vars, f.bottleneck)?;
        let u = tape.concat(&[u, f.skip2], 1)?;
        let u = self.dec1.forward(tape, vars, u)?;
        let u = self.up2.forward(tape, vars, u)?;
        let u = tape.concat(&[u, f.skip1], 1)?;
        let u = self.dec2.forward(tape, vars, u)?;
        self.head.forward(tape, vars, u)
    }

    /// Inference logits for a batch of images.
    pub fn logits(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax label for a batch of images, row-major per image.
    pub fn predict(&self, images: &Tensor<f32>) -> Result<Vec<u8>> {
        Ok(argmax_channels(&self.logits(images)?))
    }
}

/// Argmax over axis 1 of `[n, c, h, w]`; ties go to the lower channel.
pub fn argmax_channels(logits: &Tensor<f32>) -> Vec<u8> {
    let s = logits.shape();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for px in 0..p {
            let mut best = 0;
            for ch in 1..c {
                if d[(i * c + ch) * p + px] > d[(i * c + best) * p + px] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// Builds a UNet. The encoder comes from `transfer` when given, else from a
/// seeded random init; the decoder is always seeded random init.
///
/// A transfer checkpoint must hold every encoder parameter with matching
/// shape; anything else is reported by name and no model is built.
pub fn build_unet(config: UnetConfig, transfer: Option<&Checkpoint>, seed: u64) -> Result<UnetModel> {
    config.validate()?;
    let (w1, w2, w3) = config.widths;
    let mut params = ParamSet::new();
    let encoder = UnetEncoder::new(&mut params, config.widths, &mut stream(seed, "unet.encoder", 0));
    let mut rng = stream(seed, "unet.decoder", 0);
    let up1 = ConvTranspose2d::new(&mut params, "dec.up1", w3, w2, 2, 2, 0, &mut rng);
    let dec1 = DoubleConv::new(&mut params, "dec.block1", 2 * w2, w2, &mut rng);
    let up2 = ConvTranspose2d::new(&mut params, "dec.up2", w2, w1, 2, 2, 0, &mut rng);
    let dec2 = DoubleConv::new(&mut params, "dec.block2", 2 * w1, w1, &mut rng);
    let head = Conv2d::new(&mut params, "dec.head", w1, config.n_classes + 1, 1, 1, 0, &mut rng);
    if let Some(ckpt) = transfer {
        params.load_named(ckpt.entries(), ENCODER_PREFIX)?;
    }
    Ok(UnetModel {
        config,
        params,
        encoder,
        up1,
        dec1,
        up2,
        dec2,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn output_matches_input_extent() {
        let m = build_unet(UnetConfig::default(), None, 0).unwrap();
        let x = Tensor::from_fn(&[2, 1, 16, 16], |i| (i % 5) as f32 / 5.0);
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 16, 16]);
        assert!(m.logits(&Tensor::zeros(&[1, 1, 10, 10])).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_unet(UnetConfig::default(), None, 7).unwrap();
        let b = build_unet(UnetConfig::default(), None, 7).unwrap();
        assert_eq!(a.params(), b.params());
        let c = build_unet(UnetConfig::default(), None, 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn transfer_loads_encoder_only() {
        let donor = build_unet(UnetConfig::default(), None, 1).unwrap();
        let ckpt = Checkpoint::new(
            donor
                .params()
                .to_entries()
                .into_iter()
                .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
                .collect(),
        )
        .unwrap();
        let m = build_unet(UnetConfig::default(), Some(&ckpt), 2).unwrap();
        let fresh = build_unet(UnetConfig::default(), None, 2).unwrap();
        for (name, t) in m.params().iter() {
            if name.starts_with(ENCODER_PREFIX) {
                assert_eq!(t.data(), ckpt.get(name).unwrap().data(), "{name}");
            } else {
                assert_eq!(t.data(), fresh.params().get(name).unwrap().data(), "{name}");
            }
        }
    }

    #[test]
    fn mismatched_transfer_names_parameters() {
        let other = build_unet(
            UnetConfig {
                widths: (8, 32, 64),
                n_classes: 4,
            },
            None,
            0,
        )
        .unwrap();
        let ckpt = Checkpoint::from_params(other.params());
        match build_unet(UnetConfig::default(), Some(&ckpt), 0) {
            Err(Error::ParamMismatch(names)) => {
                assert!(names.iter().any(|n| n.starts_with("enc.block1.conv1.weight")));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn argmax_prefers_lower_channel_on_ties() {
        let t = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![0, 1]);
    }
}
