use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Result};
use crate::nn::{Linear, ParamSet};
use crate::rng::stream;
use crate::segmentation::UnetEncoder;
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 256, out: 32 }
    }
}

/// UNet encoder, global average pool and a two-layer projection head whose
/// output rows are unit length.
#[derive(Clone, Debug)]
pub struct EncoderModel {
    params: ParamSet,
    encoder: UnetEncoder,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderModel {
    pub fn new(widths: (usize, usize, usize), head: HeadConfig, seed: u64) -> Result<Self> {
        if head.hidden == 0 || head.out == 0 || widths.0 == 0 || widths.1 == 0 || widths.2 == 0 {
            return Err(invalid("encoder widths and head dims must be positive"));
        }
        let mut params = ParamSet::new();
        let encoder = UnetEncoder::new(&mut params, widths, &mut stream(seed, "contrastive.encoder", 0));
        let mut rng = stream(seed, "contrastive.head", 0);
        let fc1 = Linear::new(&mut params, "head.fc1", widths.2, head.hidden, &mut rng);
        let fc2 = Linear::new(&mut params, "head.fc2", head.hidden, head.out, &mut rng);
        Ok(Self {
            params,
            encoder,
            fc1,
            fc2,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Unit-norm projections `[n, out]` of images `[n, 1, H, W]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let f = self.encoder.forward(tape, vars, x)?;
        let s = tape.shape(f.bottleneck).to_vec();
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        let flat = tape.reshape(f.bottleneck, &[n, c, area])?;
        let pooled = tape.sum_axis(flat, 2)?;
        let pooled = tape.mul_scalar(pooled, T::from_f64_lossy(1.0 / area as f64))?;
        let h = self.fc1.forward(tape, vars, pooled)?;
        let h = tape.relu(h)?;
        let o = self.fc2.forward(tape, vars, h)?;
        Ok(tape.l2_normalize(o)?)
    }

    /// Inference projections.
    pub fn embed(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = self.params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(y).clone())
    }

    /// Encoder and head parameters.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(&self.params)
    }

    /// Restores all parameters from a checkpoint written by
    /// [`EncoderModel::checkpoint`].
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.params.load_named(ckpt.entries(), "")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{build_unet, UnetConfig, ENCODER_PREFIX};

    #[test]
    fn projections_are_unit_norm() {
        let m = EncoderModel::new((4, 8, 16), HeadConfig { hidden: 32, out: 8 }, 0).unwrap();
        let x = Tensor::from_fn(&[3, 1, 16, 16], |i| ((i * 31) % 17) as f32 / 17.0);
        let y = m.embed(&x).unwrap();
        assert_eq!(y.shape(), &[3, 8]);
        for row in y.data().chunks(8) {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn encoder_names_match_unet() {
        let m = EncoderModel::new((16, 32, 64), HeadConfig::default(), 0).unwrap();
        let u = build_unet(UnetConfig::default(), None, 0).unwrap();
        let enc = |p: &ParamSet| -> Vec<(String, Vec<usize>)> {
            p.iter()
                .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect()
        };
        assert_eq!(enc(m.params()), enc(u.params()));
        let transferred = build_unet(UnetConfig::default(), Some(&m.checkpoint()), 0).unwrap();
        for (n, t) in transferred
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with(ENCODER_PREFIX))
        {
            assert_eq!(t.data(), m.params().get(n).unwrap().data());
        }
    }
}
