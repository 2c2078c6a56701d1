//! Central finite-difference gradient checks, meant to run in `f64`.

use crate::error::{Result, TensorError};
use crate::store::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn finite(value: f64, coordinate: usize, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(TensorError::NonFinite {
            coordinate,
            detail: format!("{what} = {value}"),
        })
    }
}

/// Maximum over the coordinates of `x` of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` for a scalar
/// function `f`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let out = f(&mut tape, xv);
    let grads = tape.backward(out)?;
    let zeros = vec![0.0; x.numel()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros).to_vec();

    let eval = |t: Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let v = tape.variable(t);
        let o = f(&mut tape, v);
        tape.value(o).item()
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let fp = finite(eval(plus), i, "f(x + eps)")?;
        let fm = finite(eval(minus), i, "f(x - eps)")?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = finite(analytic[i], i, "analytic gradient")?;
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// Gradient check over selected parameter coordinates of a model.
///
/// `store` projects the model onto the parameter store being checked and
/// `f` records the scalar objective. Each coordinate is a
/// `(parameter, flat index)` pair; `coordinate` in errors is its position
/// in `coords`.
pub fn grad_check_params<M, S, F>(
    model: &mut M,
    store: S,
    mut f: F,
    coords: &[(ParamId, usize)],
    eps: f64,
) -> Result<f64>
where
    S: Fn(&mut M) -> &mut ParamStore<f64>,
    F: FnMut(&mut M, &mut Tape<f64>) -> Var,
{
    if !(eps > 0.0) {
        return Err(TensorError::Invalid(format!("eps must be positive, got {eps}")));
    }
    store(model).zero_grads();
    let mut tape = Tape::new();
    let out = f(model, &mut tape);
    let grads = tape.backward(out)?;
    store(model).accumulate(&grads);
    let analytic: Vec<f64> = coords
        .iter()
        .map(|&(id, i)| store(model).grad(id).map_or(0.0, |g| g[i]))
        .collect();
    store(model).zero_grads();

    let mut worst = 0.0f64;
    for (c, &(id, i)) in coords.iter().enumerate() {
        let orig = store(model).value(id).data()[i];
        let mut eval = |model: &mut M, v: f64| {
            store(model).value_mut(id).data_mut()[i] = v;
            let mut tape = Tape::new();
            let o = f(model, &mut tape);
            tape.value(o).item()
        };
        let fp = eval(model, orig + eps);
        let fm = eval(model, orig - eps);
        store(model).value_mut(id).data_mut()[i] = orig;
        let fp = finite(fp, c, "f(w + eps)")?;
        let fm = finite(fm, c, "f(w - eps)")?;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = finite(analytic[c], c, "analytic gradient")?;
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_unit_gradient() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 5.0, 2.0]);
        let err = grad_check(|t, v| t.sum(v), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn non_finite_value_reports_coordinate() {
        let x = Tensor::from_vec(&[2], vec![1.0, 1.0e308]);
        let err = grad_check(
            |t, v| {
                let s = t.scale(v, 10.0);
                t.sum(s)
            },
            &x,
            1e-6,
        )
        .unwrap_err();
        assert!(
            matches!(err, TensorError::NonFinite { coordinate: 0 | 1, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::from_vec(&[1], vec![1.0]);
        assert!(grad_check(|t, v| t.sum(v), &x, 0.0).is_err());
    }
}
