//! Central finite-difference verification of tape gradients.

use super::{Real, Tape, Tensor, TensorError, Var};

fn eval<T: Real, F, E>(f: &F, xs: &[Tensor<T>]) -> Result<f64, E>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.item(out).as_f64();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite {
            op: "finite_diff_check",
        }
        .into())
    }
}

/// Max relative error between analytic and central-difference gradients of
/// a scalar function of several tensors.
///
/// Error per coordinate is `|analytic − numeric| / max(1, |analytic|)`. The
/// numeric derivative divides by the step actually realised in `T`, so the
/// check is not polluted by rounding of `x ± h`.
///
/// The closure may fail with any error type that tensor errors convert into.
pub fn finite_diff_check_many<T: Real, F, E>(f: F, xs: &[Tensor<T>], h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(1e-5..=1e-2).contains(&h) {
        return Err(TensorError::BadStep(h).into());
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| match tape.grad(v) {
            Some(g) => g.iter().map(|g| g.as_f64()).collect(),
            None => vec![0.0; x.len()],
        })
        .collect();
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "finite_diff_check",
        }
        .into());
    }

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<T>> = xs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for (c, &a) in grads.iter().enumerate() {
            let orig = xs[t].data()[c];
            let hi = orig + T::from_f64_lossy(h);
            let lo = orig - T::from_f64_lossy(h);
            probe[t].data_mut()[c] = hi;
            let f_hi = eval(&f, &probe)?;
            probe[t].data_mut()[c] = lo;
            let f_lo = eval(&f, &probe)?;
            probe[t].data_mut()[c] = orig;
            let numeric = (f_hi - f_lo) / (hi - lo).as_f64();
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`finite_diff_check_many`].
pub fn finite_diff_check<T: Real, F, E>(f: F, x: &Tensor<T>, h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::new(vec![4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let y = tape.square(x)?;
                tape.sum(y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let x = Tensor::<f64>::zeros(&[1]);
        let r = finite_diff_check(|tape, x| tape.sum(x), &x, 0.1);
        assert_eq!(r.unwrap_err(), TensorError::BadStep(0.1));
    }

    #[test]
    fn non_finite_intermediate_is_error() {
        let x = Tensor::<f64>::new(vec![2], vec![1e-4, 1.0]).unwrap();
        // log(x − h) is undefined at the first coordinate
        let r = finite_diff_check(
            |tape, x| {
                let y = tape.log(x)?;
                tape.sum(y)
            },
            &x,
            1e-3,
        );
        assert!(matches!(r, Err(TensorError::NonFinite { .. })));
    }
}
