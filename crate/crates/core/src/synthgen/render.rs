use std::f64::consts::PI;

use rand::Rng as _;

use super::DatasetSpec;
use crate::rng::{normal, Rng};

/// Intensity offset of class `k` (0-based) around the shared mid level.
fn class_offset(k: usize, n_classes: usize) -> f64 {
    0.3 * (2.0 * k as f64 / (n_classes - 1) as f64 - 1.0)
}

/// Renders one sample of `class` (1-based). All random draws happen in a
/// fixed order so geometry does not depend on class or contrast.
pub(super) fn render(spec: &DatasetSpec, class: u8, rng: &mut Rng) -> (Vec<f32>, Vec<u8>) {
    let h = spec.image_size;
    let hf = h as f64;
    let var = spec.intra_class_variation as f64;
    let contrast = spec.contrast as f64;
    let mut u = || rng.random_range(-1.0..=1.0f64);

    let cx = hf / 2.0 + u() * var * 0.18 * hf;
    let cy = hf / 2.0 + u() * var * 0.18 * hf;
    let scale = 1.0 + u() * var * 0.25;
    let theta = (u() + 1.0) * 0.5 * PI;
    let bg = 0.15 + u() * 0.05;
    let bg_amp = 0.08 * var * u();
    let bg_dir = (u() + 1.0) * PI;
    let level_jitter = u() * var * 0.05;

    let k = (class - 1) as usize;
    let level = 0.6 + contrast * class_offset(k, spec.n_classes) + level_jitter;
    let (cos, sin) = (theta.cos(), theta.sin());
    let (gx, gy) = (bg_dir.cos(), bg_dir.sin());

    let mut image = Vec::with_capacity(h * h);
    let mut mask = Vec::with_capacity(h * h);
    for y in 0..h {
        for x in 0..h {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let along = dx * cos + dy * sin;
            let across = -dx * sin + dy * cos;
            let r = (dx * dx + dy * dy).sqrt();
            let structure = match k % 4 {
                0 => {
                    let radius = 0.26 * hf * scale;
                    (r <= radius).then(|| level + contrast * 0.25 * (0.5 - r / radius))
                }
                1 => {
                    let (inner, outer) = (0.17 * hf * scale, 0.30 * hf * scale);
                    (r >= inner && r <= outer).then_some(level)
                }
                2 => {
                    let (half_len, half_w) = (0.38 * hf * scale, 0.10 * hf * scale);
                    (along.abs() <= half_len && across.abs() <= half_w)
                        .then(|| level + contrast * 0.2 * along / half_len)
                }
                _ => {
                    let half = 0.22 * hf * scale;
                    (along.abs() <= half && across.abs() <= half)
                        .then(|| level + contrast * 0.2 * (2.0 * PI * along / (0.15 * hf)).sin())
                }
            };
            let background = bg + bg_amp * ((dx * gx + dy * gy) / hf);
            let (value, label) = match structure {
                Some(v) => (v, class),
                None => (background, 0),
            };
            image.push(value);
            mask.push(label);
        }
    }
    let sigma = spec.noise_sigma as f64;
    let image = image
        .into_iter()
        .map(|v| (v + sigma * normal(rng)).clamp(0.0, 1.0) as f32)
        .collect();
    (image, mask)
}
