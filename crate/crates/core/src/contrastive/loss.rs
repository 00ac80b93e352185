use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Which features sit in the denominator of each term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Only features with a different pseudo-label.
    #[default]
    NegativesOnly,
    /// Negatives and positives together.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub tau: f64,
    /// Count `f_i` itself among its positives.
    pub include_self: bool,
    pub denominator: Denominator,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            tau: 0.1,
            include_self: false,
            denominator: Denominator::NegativesOnly,
        }
    }
}

/// Positive index sets: same label, `i` itself only with `include_self`.
pub fn positive_sets(labels: &[usize], include_self: bool) -> Vec<Vec<usize>> {
    (0..labels.len())
        .map(|i| {
            (0..labels.len())
                .filter(|&j| labels[j] == labels[i] && (j != i || include_self))
                .collect()
        })
        .collect()
}

/// Row masks and per-row weights `1/|P_i|`, validated.
fn masks<T: Real>(labels: &[usize], opts: &LossOptions) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let m = labels.len();
    let pos = positive_sets(labels, opts.include_self);
    let mut pmask = vec![T::zero(); m * m];
    let mut dmask = vec![T::zero(); m * m];
    let mut weights = Vec::with_capacity(m);
    for i in 0..m {
        let others = pos[i].iter().filter(|&&j| j != i).count();
        if others == 0 {
            return Err(Error::DegenerateBatch("no positives"));
        }
        if labels.iter().all(|&l| l == labels[i]) {
            return Err(Error::DegenerateBatch("no negatives"));
        }
        for &j in &pos[i] {
            pmask[i * m + j] = T::one();
        }
        for k in 0..m {
            let negative = labels[k] != labels[i];
            let in_den = match opts.denominator {
                Denominator::NegativesOnly => negative,
                Denominator::All => negative || pmask[i * m + k] == T::one(),
            };
            if in_den {
                dmask[i * m + k] = T::one();
            }
        }
        weights.push(T::one() / T::from_usize(pos[i].len()).unwrap());
    }
    Ok((
        Tensor::new(vec![m, m], pmask)?,
        Tensor::new(vec![m, m], dmask)?,
        Tensor::new(vec![m], weights)?,
    ))
}

/// Cluster-guided contrastive loss of a `[2b, o]` feature matrix.
///
/// For each row `i`:
/// `term_i = (1/|P_i|)·log(Σ_{j∈P_i} e^{f_i·f_j/τ} / Σ_{k∈D_i} e^{f_i·f_k/τ})`
/// and the loss is `−(1/2b)·Σ_i term_i`. Similarities are shifted by their
/// row maximum before exponentiation; the shift cancels in the ratio.
pub fn contrastive_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    labels: &[usize],
    opts: &LossOptions,
) -> Result<Var> {
    let s = tape.shape(features).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(invalid(format!("features {s:?} do not match {} labels", labels.len())));
    }
    if opts.tau.is_nan() || opts.tau <= 0.0 {
        return Err(invalid(format!("temperature must be positive, got {}", opts.tau)));
    }
    let m = s[0];
    let (pmask, dmask, weights) = masks::<T>(labels, opts)?;
    let ft = tape.transpose(features)?;
    let gram = tape.matmul(features, ft)?;
    let sim = tape.mul_scalar(gram, T::from_f64_lossy(1.0 / opts.tau))?;
    let row_max = {
        let d = tape.value(sim).data();
        let maxes: Vec<T> = d
            .chunks(m)
            .map(|r| r.iter().copied().fold(T::neg_infinity(), T::max))
            .collect();
        Tensor::from_fn(&[m, m], |i| maxes[i / m])
    };
    let row_max = tape.constant(row_max);
    let shifted = tape.sub(sim, row_max)?;
    let e = tape.exp(shifted)?;
    let pmask = tape.constant(pmask);
    let dmask = tape.constant(dmask);
    let pe = tape.mul(e, pmask)?;
    let de = tape.mul(e, dmask)?;
    let num = tape.sum_axis(pe, 1)?;
    let den = tape.sum_axis(de, 1)?;
    let lnum = tape.log(num)?;
    let lden = tape.log(den)?;
    let ratio = tape.sub(lnum, lden)?;
    let weights = tape.constant(weights);
    let terms = tape.mul(ratio, weights)?;
    let total = tape.sum(terms)?;
    Ok(tape.mul_scalar(total, T::from_f64_lossy(-1.0 / m as f64))?)
}

/// Value of [`contrastive_loss_on_tape`] as a scalar tensor.
pub fn cluster_contrastive_loss<T: Real>(
    features: &Tensor<T>,
    labels: &[usize],
    opts: &LossOptions,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let l = contrastive_loss_on_tape(&mut tape, f, labels, opts)?;
    Ok(tape.value(l).clone())
}

/// Labels that make each image its own class: rows `i` and `i + b` share
/// label `i`.
pub fn instance_labels(two_b: usize) -> Vec<usize> {
    let b = two_b / 2;
    (0..two_b).map(|i| i % b.max(1)).collect()
}

/// Contrastive loss where only the two views of one image are positives.
pub fn instance_discrimination_loss<T: Real>(features: &Tensor<T>, opts: &LossOptions) -> Result<Tensor<T>> {
    let m = features.shape().first().copied().unwrap_or(0);
    if m % 2 != 0 {
        return Err(invalid("instance discrimination needs an even number of views"));
    }
    cluster_contrastive_loss(features, &instance_labels(m), opts)
}
