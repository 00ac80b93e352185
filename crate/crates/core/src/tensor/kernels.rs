//! Raw buffer kernels shared by the convolution ops.

use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent of a forward convolution over this geometry, if valid.
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let oh = (self.h + 2 * self.pad).checked_sub(self.k)? / self.stride + 1;
        let ow = (self.w + 2 * self.pad).checked_sub(self.k)? / self.stride + 1;
        Some((oh, ow))
    }
}

/// Unfolds `x` (`[n, c, h, w]`) into columns `[c·k·k, n·oh·ow]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw().expect("valid conv geometry");
    let p = oh * ow;
    let cols_n = g.n * p;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * cols_n];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut dst_row[ni * p + oy * ow..ni * p + (oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub(crate) fn col2im<T: Real>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw().expect("valid conv geometry");
    let p = oh * ow;
    let cols_n = g.n * p;
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..g.n {
                    let base = (ni * g.c + ci) * g.h * g.w;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut x[base + iy as usize * g.w..base + (iy as usize + 1) * g.w];
                        let src = &src_row[ni * p + oy * ow..ni * p + (oy + 1) * ow];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] = dst[ix as usize] + s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p]` → `[c, n·p]`.
pub(crate) fn ncp_to_cnp<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]
                .copy_from_slice(&x[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
        }
    }
    out
}

/// `[c, n·p]` → `[n, c, p]`.
pub(crate) fn cnp_to_ncp<T: Real>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                .copy_from_slice(&x[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]);
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y
        let g = ConvGeom {
            n: 2,
            c: 3,
            h: 5,
            w: 4,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, g);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn permutes_round_trip() {
        let x: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let y = ncp_to_cnp(&x, 2, 3, 4);
        assert_eq!(y[4], x[12]);
        assert_eq!(cnp_to_ncp(&y, 2, 3, 4), x);
    }
}
