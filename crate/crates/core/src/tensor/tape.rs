use super::kernels::{cnp_to_ncp, col2im, im2col, ncp_to_cnp, split_axis, ConvGeom};
use super::{numel, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    SumExcept { x: Var, axis: usize },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, geom: ConvGeom },
    AddBias { x: Var, b: Var, axis: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    L2Norm(Var),
    L2Normalize(Var),
    LogSoftmax { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed ops.
///
/// Every op appends one node; [`Tape::backward`] walks the nodes in exact
/// reverse order. Leaves created from tensors with `requires_grad` receive
/// accumulated gradients (`+=`), so two backward passes double them.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

const NORM_EPS: f64 = 1e-12;

fn ensure_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element of a value; the loss value for scalar nodes.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Gradient accumulated on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        ensure_finite(op_name, &data)?;
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        let value = Tensor::new(shape, data)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::L2Norm(x)
            | Op::L2Normalize(x) => vec![*x],
            Op::SumAxis { x, .. }
            | Op::SumExcept { x, .. }
            | Op::MaxPool2 { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Softmax { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { x, w, .. } | Op::ConvTranspose2d { x, w, .. } => vec![*x, *w],
            Op::AddBias { x, b, .. } => vec![*x, *b],
        }
    }

    // ----- elementwise --------------------------------------------------

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok((Bcast::Same, ta.shape().to_vec()))
        } else if tb.len() == 1 {
            Ok((Bcast::RightScalar, ta.shape().to_vec()))
        } else if ta.len() == 1 {
            Ok((Bcast::LeftScalar, tb.shape().to_vec()))
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (mode, shape) = self.bcast(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = match mode {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::RightScalar => da.iter().map(|&x| f(x, db[0])).collect(),
            Bcast::LeftScalar => db.iter().map(|&y| f(da[0], y)).collect(),
        };
        self.push(name, shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(TensorError::DivisionByZero { op: "div" });
        }
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v + c).collect();
        let shape = t.shape().to_vec();
        self.push("add_scalar", shape, data, Op::AddScalar(x))
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let shape = t.shape().to_vec();
        self.push("mul_scalar", shape, data, Op::MulScalar(x, c))
    }

    pub fn div_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        if c.is_zero() {
            return Err(TensorError::DivisionByZero { op: "div_scalar" });
        }
        self.mul_scalar(x, T::one() / c)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.mul_scalar(x, -T::one())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        self.push(name, shape, data, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.ln(), Op::Log(x))
    }

    // ----- reductions ---------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", vec![], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_usize(t.len()).unwrap();
        self.push("mean", vec![], vec![m], Op::Mean(x))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::InvalidShape {
                op,
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        self.push("sum_axis", shape, out, Op::SumAxis { x, axis })
    }

    /// Sums over every axis except `axis`, giving a vector of its length.
    pub fn sum_except(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_except", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::zero(); len];
        for o in 0..outer {
            for (l, slot) in out.iter_mut().enumerate() {
                let s: T = d[(o * len + l) * inner..(o * len + l + 1) * inner]
                    .iter()
                    .copied()
                    .sum();
                *slot = *slot + s;
            }
        }
        self.push("sum_except", vec![len], out, Op::SumExcept { x, axis })
    }

    // ----- linear algebra & shape ----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            false,
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if numel(shape) != t.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let len = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    /// Adds a per-index bias `b` (length `shape[axis]`) along `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        self.check_axis("add_bias", x, axis)?;
        let (tx, tb) = (self.value(x), self.value(b));
        let (outer, len, inner) = split_axis(tx.shape(), axis);
        if tb.shape() != [len] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = tx.data().to_vec();
        for o in 0..outer {
            for (l, &bias) in tb.data().iter().enumerate() {
                out[(o * len + l) * inner..(o * len + l + 1) * inner]
                    .iter_mut()
                    .for_each(|v| *v = *v + bias);
            }
        }
        let shape = tx.shape().to_vec();
        self.push("add_bias", shape, out, Op::AddBias { x, b, axis })
    }

    // ----- convolution ---------------------------------------------------

    /// 2-D convolution. `x`: `[n, c, h, w]`, `w`: `[co, c, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            k: sw[2],
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw().ok_or_else(|| TensorError::InvalidShape {
            op: "conv2d",
            msg: format!("kernel {} larger than padded input {:?}", sw[2], sx),
        })?;
        let co = sw[0];
        let p = oh * ow;
        let kk = geom.c * geom.k * geom.k;
        let cols = im2col(self.value(x).data(), geom);
        let mut out = vec![T::zero(); co * geom.n * p];
        T::gemm(
            co,
            kk,
            geom.n * p,
            self.value(w).data(),
            (kk, 1),
            &cols,
            (geom.n * p, 1),
            &mut out,
            false,
        );
        let out = cnp_to_ncp(&out, geom.n, co, p);
        self.push("conv2d", vec![geom.n, co, oh, ow], out, Op::Conv2d { x, w, geom })
    }

    /// Transposed 2-D convolution. `x`: `[n, ci, h, w]`, `w`: `[ci, co, k, k]`.
    /// Output extent is `(h − 1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, ci, hi, wi, co, k) = (sx[0], sx[1], sx[2], sx[3], sw[1], sw[2]);
        let out_dim = |d: usize| ((d - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (ho, wo) = match (out_dim(hi), out_dim(wi)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "conv_transpose2d",
                    msg: format!("padding {pad} too large for input {sx:?}"),
                })
            }
        };
        let geom = ConvGeom {
            n,
            c: co,
            h: ho,
            w: wo,
            k,
            stride,
            pad,
        };
        debug_assert_eq!(geom.out_hw(), Some((hi, wi)));
        let pi = hi * wi;
        let ckk = co * k * k;
        let x_cnp = ncp_to_cnp(self.value(x).data(), n, ci, pi);
        let mut cols = vec![T::zero(); ckk * n * pi];
        T::gemm(
            ckk,
            ci,
            n * pi,
            self.value(w).data(),
            (1, ckk),
            &x_cnp,
            (n * pi, 1),
            &mut cols,
            false,
        );
        let out = col2im(&cols, geom);
        self.push(
            "conv_transpose2d",
            vec![n, co, ho, wo],
            out,
            Op::ConvTranspose2d { x, w, geom },
        )
    }

    /// 2×2 max-pooling with stride 2. Ties resolve to the first element in
    /// row-major window order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(TensorError::InvalidShape {
                op: "max_pool2",
                msg: format!("expected [n, c, even, even], got {s:?}"),
            });
        }
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for plane in 0..nc {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        self.push("max_pool2", vec![s[0], s[1], oh, ow], out, Op::MaxPool2 { x, argmax })
    }

    // ----- normalization -------------------------------------------------

    fn rows_of(&self, op: &'static str, x: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        match s.last() {
            Some(&d) => Ok((numel(s) / d, d)),
            None => Err(TensorError::InvalidShape {
                op,
                msg: "needs rank ≥ 1".into(),
            }),
        }
    }

    /// Euclidean norm along the last axis.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.rows_of("l2_norm", x)?;
        let data = self.value(x).data();
        let out: Vec<T> = (0..rows)
            .map(|r| data[r * d..(r + 1) * d].iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut shape = self.shape(x).to_vec();
        shape.pop();
        self.push("l2_norm", shape, out, Op::L2Norm(x))
    }

    /// Scales every row (last axis) to unit Euclidean length.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, d) = self.rows_of("l2_normalize", x)?;
        let eps = T::from_f64_lossy(NORM_EPS);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            out.extend(row.iter().map(|&v| v / norm));
        }
        let shape = self.shape(x).to_vec();
        self.push("l2_normalize", shape, out, Op::L2Normalize(x))
    }

    fn softmax_rows(data: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out = vec![T::zero(); data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| data[at(l)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|l| (data[at(l)] - m).exp()).sum();
                let lse = m + z.ln();
                for l in 0..len {
                    out[at(l)] = if log {
                        data[at(l)] - lse
                    } else {
                        (data[at(l)] - lse).exp()
                    };
                }
            }
        }
        out
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = self.value(x);
        let out = Self::softmax_rows(t.data(), t.shape(), axis, true);
        let shape = t.shape().to_vec();
        self.push("log_softmax", shape, out, Op::LogSoftmax { x, axis })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let out = Self::softmax_rows(t.data(), t.shape(), axis, false);
        let shape = t.shape().to_vec();
        self.push("softmax", shape, out, Op::Softmax { x, axis })
    }

    // ----- backward ------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`, accumulating into every
    /// differentiable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (input, grad) in self.node_backward(i, &g) {
                if self.nodes[input.0].requires_grad {
                    acc(&mut adj[input.0], grad);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        g: &[T],
        da: impl Fn(T, T, T) -> T,
        db: impl Fn(T, T, T) -> T,
    ) -> Vec<(Var, Vec<T>)> {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (want_a, want_b) = (self.wants(a), self.wants(b));
        let mut ga = vec![T::zero(); va.len()];
        let mut gb = vec![T::zero(); vb.len()];
        let sa = va.len() == 1 && vb.len() != 1;
        let sb = vb.len() == 1 && va.len() != 1;
        for (i, &gi) in g.iter().enumerate() {
            let ia = if sa { 0 } else { i };
            let ib = if sb { 0 } else { i };
            let (x, y) = (va[ia], vb[ib]);
            if want_a {
                ga[ia] = ga[ia] + da(x, y, gi);
            }
            if want_b {
                gb[ib] = gb[ib] + db(x, y, gi);
            }
        }
        vec![(a, ga), (b, gb)]
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => self.binary_backward(*a, *b, g, |_, _, g| g, |_, _, g| g),
            Op::Sub(a, b) => self.binary_backward(*a, *b, g, |_, _, g| g, |_, _, g| -g),
            Op::Mul(a, b) => self.binary_backward(*a, *b, g, |_, y, g| g * y, |x, _, g| g * x),
            Op::Div(a, b) => self.binary_backward(*a, *b, g, |_, y, g| g / y, |x, y, g| -g * x / (y * y)),
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::MulScalar(x, c) => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => vec![(
                *x,
                g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect(),
            )],
            Op::Exp(x) => vec![(*x, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect())],
            Op::Log(x) => {
                let xd = self.value(*x).data();
                vec![(*x, g.iter().zip(xd).map(|(&gi, &xi)| gi / xi).collect())]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).len()])],
            Op::Mean(x) => {
                let n = self.value(*x).len();
                vec![(*x, vec![g[0] / T::from_usize(n).unwrap(); n])]
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![(*x, gx)]
            }
            Op::SumExcept { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for (l, &gl) in g.iter().enumerate() {
                        gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .iter_mut()
                            .for_each(|v| *v = gl);
                    }
                }
                vec![(*x, gx)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut out = Vec::new();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, (n, 1), self.value(*b).data(), (1, n), &mut ga, false);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), (1, k), g, (n, 1), &mut gb, false);
                    out.push((*b, gb));
                }
                out
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let out_len = node.value.shape()[*axis];
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * out_len + offset) * inner;
                        gv.extend_from_slice(&g[start..start + len * inner]);
                    }
                    offset += len;
                    res.push((v, gv));
                }
                res
            }
            Op::AddBias { x, b, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gb = vec![T::zero(); len];
                for o in 0..outer {
                    for (l, slot) in gb.iter_mut().enumerate() {
                        let s: T = g[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .iter()
                            .copied()
                            .sum();
                        *slot = *slot + s;
                    }
                }
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::Conv2d { x, w, geom } => {
                let co = self.shape(*w)[0];
                let (oh, ow) = geom.out_hw().unwrap();
                let np = geom.n * oh * ow;
                let kk = geom.c * geom.k * geom.k;
                let g_cnp = ncp_to_cnp(g, geom.n, co, oh * ow);
                let mut out = Vec::new();
                if self.wants(*w) {
                    let cols = im2col(self.value(*x).data(), *geom);
                    let mut gw = vec![T::zero(); co * kk];
                    T::gemm(co, np, kk, &g_cnp, (np, 1), &cols, (1, np), &mut gw, false);
                    out.push((*w, gw));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); kk * np];
                    T::gemm(
                        kk,
                        co,
                        np,
                        self.value(*w).data(),
                        (1, kk),
                        &g_cnp,
                        (np, 1),
                        &mut dcols,
                        false,
                    );
                    out.push((*x, col2im(&dcols, *geom)));
                }
                out
            }
            Op::ConvTranspose2d { x, w, geom } => {
                let sx = self.shape(*x);
                let (n, ci, pi) = (sx[0], sx[1], sx[2] * sx[3]);
                let ckk = geom.c * geom.k * geom.k;
                let gcols = im2col(g, *geom);
                let mut out = Vec::new();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); ci * n * pi];
                    T::gemm(
                        ci,
                        ckk,
                        n * pi,
                        self.value(*w).data(),
                        (ckk, 1),
                        &gcols,
                        (n * pi, 1),
                        &mut dx,
                        false,
                    );
                    out.push((*x, cnp_to_ncp(&dx, n, ci, pi)));
                }
                if self.wants(*w) {
                    let x_cnp = ncp_to_cnp(self.value(*x).data(), n, ci, pi);
                    let mut gw = vec![T::zero(); ci * ckk];
                    T::gemm(
                        ci,
                        n * pi,
                        ckk,
                        &x_cnp,
                        (n * pi, 1),
                        &gcols,
                        (1, n * pi),
                        &mut gw,
                        false,
                    );
                    out.push((*w, gw));
                }
                out
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (&idx, &gi) in argmax.iter().zip(g) {
                    gx[idx] = gx[idx] + gi;
                }
                vec![(*x, gx)]
            }
            Op::L2Norm(x) => {
                let xd = self.value(*x).data();
                let d = *self.shape(*x).last().unwrap();
                let mut gx = vec![T::zero(); xd.len()];
                for (r, (&gr, &norm)) in g.iter().zip(y).enumerate() {
                    if norm > T::zero() {
                        for c in r * d..(r + 1) * d {
                            gx[c] = gr * xd[c] / norm;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::L2Normalize(x) => {
                let xd = self.value(*x).data();
                let d = *self.shape(*x).last().unwrap();
                let eps = T::from_f64_lossy(NORM_EPS);
                let mut gx = vec![T::zero(); xd.len()];
                for r in 0..xd.len() / d {
                    let span = r * d..(r + 1) * d;
                    let norm = xd[span.clone()].iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                    let dot: T = g[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum();
                    for c in span {
                        gx[c] = (g[c] - y[c] * dot) / norm;
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gs: T = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = g[at(l)] - y[at(l)].exp() * gs;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
        }
    }
}
