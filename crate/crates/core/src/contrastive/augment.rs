//! Spatial and appearance augmentation of single-channel images.

use rand::Rng as _;

use crate::rng::{normal, Rng};

/// Parameters of one augmented view. Sampling and application are separate
/// so a view can be reproduced or forced to the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugParams {
    /// Fraction of the image area kept by the square crop.
    pub crop_scale: f64,
    /// Crop offset as a fraction of the free margin, in `[0, 1]`.
    pub crop_x: f64,
    pub crop_y: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
}

impl AugParams {
    pub fn identity() -> Self {
        Self {
            crop_scale: 1.0,
            crop_x: 0.0,
            crop_y: 0.0,
            hflip: false,
            vflip: false,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            crop_scale: rng.random_range(0.6..=1.0),
            crop_x: rng.random(),
            crop_y: rng.random(),
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            brightness: rng.random_range(-0.2..=0.2),
            contrast: rng.random_range(0.8..=1.2),
            noise_sigma: 0.02,
        }
    }
}

fn bilinear(img: &[f32], size: usize, x: f64, y: f64) -> f64 {
    let max = (size - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| img[yy * size + xx] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Applies `p` to a row-major `size×size` image. Noise draws come from `rng`
/// only when `p.noise_sigma > 0`. Output is clamped to `[0, 1]`.
pub fn apply_augmentation(image: &[f32], size: usize, p: &AugParams, rng: &mut Rng) -> Vec<f32> {
    assert_eq!(image.len(), size * size, "image is not size×size");
    let side = size as f64 * p.crop_scale.sqrt();
    let margin = size as f64 - side;
    let (ox, oy) = (p.crop_x * margin, p.crop_y * margin);
    let step = side / size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let sx = if p.hflip { size - 1 - x } else { x };
            let sy = if p.vflip { size - 1 - y } else { y };
            let u = ox + (sx as f64 + 0.5) * step - 0.5;
            let v = oy + (sy as f64 + 0.5) * step - 0.5;
            out.push(bilinear(image, size, u, v) + p.brightness);
        }
    }
    if p.contrast != 1.0 {
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut()
            .for_each(|v| *v = *v * p.contrast + (1.0 - p.contrast) * mean);
    }
    if p.noise_sigma > 0.0 {
        out.iter_mut().for_each(|v| *v += p.noise_sigma * normal(rng));
    }
    out.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect()
}

/// Two independently augmented views of one image.
pub fn augment_pair(image: &[f32], size: usize, rng: &mut Rng) -> (Vec<f32>, Vec<f32>) {
    let p1 = AugParams::sample(rng);
    let a = apply_augmentation(image, size, &p1, rng);
    let p2 = AugParams::sample(rng);
    let b = apply_augmentation(image, size, &p2, rng);
    (a, b)
}
