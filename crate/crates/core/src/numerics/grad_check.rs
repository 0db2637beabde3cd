//! Finite-difference validation of tape gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::{no_grad, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks d f / d x for a scalar-valued `f` against central differences.
///
/// The relative error denominator is floored at 1, so near-zero gradients
/// are compared absolutely.
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let var = Tensor::from_vec(&x.shape(), x.data())?;
    var.set_requires_grad(true);
    let y = f(&var)?;
    if !y.item().is_finite() {
        return Err(Error::Numeric(format!("f(x) is non-finite: {}", y.item())));
    }
    y.backward()?;
    let tape = var
        .grad()
        .unwrap_or_else(|| vec![0.0; var.numel()]);

    let probe = Tensor::from_vec(&x.shape(), x.data())?;
    let base = x.data();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..base.len() {
        let mut d = base.clone();
        d[i] = base[i] + step;
        probe.set_data(&d);
        let hi = no_grad(|| f(&probe))?.item();
        d[i] = base[i] - step;
        probe.set_data(&d);
        let lo = no_grad(|| f(&probe))?.item();
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric("non-finite value during finite differencing".into()));
        }
        let fd = (hi - lo) / (2.0 * step);
        let e = rel_err(tape[i], fd);
        if e > max_rel {
            max_rel = e;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
        checked: base.len(),
        pass: max_rel < tol,
    })
}

/// Checks the tape gradient of `loss_fn` with respect to `param`, a leaf
/// tensor embedded in a larger model. `loss_fn` is re-evaluated with the
/// parameter perturbed in place.
pub fn grad_check_param(
    loss_fn: impl Fn() -> Result<Tensor>,
    param: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    param.zero_grad();
    let loss = loss_fn()?;
    if !loss.item().is_finite() {
        return Err(Error::Numeric(format!("loss is non-finite: {}", loss.item())));
    }
    loss.backward()?;
    let tape = param
        .grad()
        .unwrap_or_else(|| vec![0.0; param.numel()]);

    let base = param.data();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for i in 0..base.len() {
        let mut d = base.clone();
        d[i] = base[i] + step;
        param.set_data(&d);
        let hi = no_grad(&loss_fn)?.item();
        d[i] = base[i] - step;
        param.set_data(&d);
        let lo = no_grad(&loss_fn)?.item();
        param.set_data(&base);
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::Numeric("non-finite value during finite differencing".into()));
        }
        let fd = (hi - lo) / (2.0 * step);
        let e = rel_err(tape[i], fd);
        if e > max_rel {
            max_rel = e;
            worst = i;
        }
    }
    param.zero_grad();
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_index: worst,
        checked: base.len(),
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_zero_error() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.0, 2.0, 5.5]).unwrap();
        let r = grad_check(|t| Ok(t.sum()), &x, 1e-6, 1e-4).unwrap();
        assert!(r.max_rel_err < 1e-9, "rel err {}", r.max_rel_err);
        assert!(r.pass);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let var = Tensor::from_vec(&[3], x.data()).unwrap();
        var.set_requires_grad(true);
        let loss = var.mul(&var).sum();
        loss.backward().unwrap();
        assert_eq!(var.grad().unwrap(), vec![2.0, 4.0, 6.0]);
        let r = grad_check(|t| Ok(t.mul(t).sum()), &x, 1e-6, 1e-4).unwrap();
        assert!(r.pass, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn non_finite_f_is_numeric_error() {
        let x = Tensor::from_vec(&[1], vec![800.0]).unwrap();
        let r = grad_check(|t| Ok(t.exp().sum()), &x, 1e-6, 1e-4);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
