//! Parameter storage, layers and the optimizer shared by all networks.

use crate::error::{invalid, Error, Result};
use crate::rng::{normal, Rng};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Named `f32` parameter arrays in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter and returns its index. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.cast::<T>())).collect()
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.cast::<T>())).collect()
    }

    /// Parameters converted to another element type, e.g. for gradient checks.
    pub fn cast<T: Real>(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| t.cast::<T>()).collect()
    }

    /// Adds the tape gradients of `vars` (as returned by [`ParamSet::bind`])
    /// into the parameter gradient buffers.
    pub fn accumulate_grads<T: Real>(&mut self, tape: &Tape<T>, vars: &[Var]) {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(v) {
                let g: Vec<f32> = g.iter().map(|x| x.as_f64() as f32).collect();
                t.accumulate_grad(&g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replaces the values of every parameter whose name appears in
    /// `entries`, optionally restricted to names starting with `prefix`.
    ///
    /// All-or-nothing: shapes are validated before anything is written, and
    /// any mismatched or missing name is reported.
    pub fn load_named(&mut self, entries: &[(String, Tensor<f32>)], prefix: &str) -> Result<usize> {
        let mut problems = Vec::new();
        let mut plan = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            if !name.starts_with(prefix) {
                continue;
            }
            match entries.iter().find(|(n, _)| n == name) {
                None => problems.push(format!("{name} (missing)")),
                Some((_, t)) if t.shape() != self.tensors[i].shape() => problems.push(format!(
                    "{name} (expected {:?}, found {:?})",
                    self.tensors[i].shape(),
                    t.shape()
                )),
                Some((_, t)) => plan.push((i, t)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::ParamMismatch(problems));
        }
        if plan.is_empty() {
            return Err(invalid(format!("no parameters with prefix {prefix:?}")));
        }
        for (i, t) in &plan {
            self.tensors[*i] = (*t).clone().with_grad();
        }
        Ok(plan.len())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<f32>)> {
        self.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }
}

fn he_normal(shape: &[usize], fan_in: usize, gain: f64, rng: &mut Rng) -> Tensor<f32> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| (normal(rng) * std) as f32)
}

/// Square-kernel convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            he_normal(&[cout, cin, k, k], cin * k * k, 1.0, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.conv2d(x, vars[self.weight], self.stride, self.pad)?;
        Ok(tape.add_bias(y, vars[self.bias], 1)?)
    }
}

/// Transposed convolution with bias; weight is `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        // each output pixel sees cin·(k/stride)² taps
        let fan_in = (cin * k * k / (stride * stride)).max(1);
        let weight = params.add(
            format!("{name}.weight"),
            he_normal(&[cin, cout, k, k], fan_in, 1.0, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.conv_transpose2d(x, vars[self.weight], self.stride, self.pad)?;
        Ok(tape.add_bias(y, vars[self.bias], 1)?)
    }
}

/// `y = x·W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: usize,
    bias: usize,
}

impl Linear {
    pub fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Self::with_gain(params, name, fan_in, fan_out, 1.0, rng)
    }

    pub fn with_gain(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        let weight = params.add(
            format!("{name}.weight"),
            he_normal(&[fan_in, fan_out], fan_in, gain, rng),
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.weight])?;
        Ok(tape.add_bias(y, vars[self.bias], 1)?)
    }
}

/// Adam with decoupled weight decay (AdamW); decay 0 gives plain Adam.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: &mut ParamSet, lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = t.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                *p -= lr * (update + self.weight_decay * *p);
            }
            t.zero_grad();
        }
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total`.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let progress = step.min(total) as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}
