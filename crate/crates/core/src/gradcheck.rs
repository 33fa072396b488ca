//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of [`relative_error`]. Central differences of an
/// `O(1)` loss carry roughly `1e-11` of roundoff at a `1e-5` step, so
/// gradients much smaller than this are compared on absolute error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(1e-6, |analytic| + |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if track { tape.param(t) } else { tape.constant(t) })
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    Ok((tape, vars, out))
}

/// Maximum relative error between analytic and central-difference
/// gradients, reported separately for each input.
pub fn gradient_check_inputs<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval_scalar(&f, inputs, true)?;
    tape.backward(out)?;
    let mut worst = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut max_err: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(&f, &probe, false)?;
            let f_plus = plus.0.value(plus.2).item();
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(&f, &probe, false)?;
            let f_minus = minus.0.value(minus.2).item();
            probe[i].data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            max_err = max_err.max(relative_error(a, numeric));
        }
        worst.push(max_err);
    }
    Ok(worst)
}

/// Maximum relative gradient error of scalar `f` at `x`.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let errs = gradient_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)?;
    Ok(errs[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::new([2, 3], vec![0.3, -1.0, 2.5, 4.0, 0.0, -7.0]).unwrap();
        let err = gradient_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = gradient_check(|t, v| Ok(t.relu(v)), &x, 1e-5).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn softmax_then_first_component() {
        let x = Tensor::from_vec(vec![0.2, -0.7, 1.3, 0.05]);
        let err = gradient_check(
            |t, v| {
                let s = t.softmax(v);
                t.slice(s, 0, 0, 1)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
