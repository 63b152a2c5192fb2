//! Central finite-difference gradient oracle.

use crate::error::{FuseError, Result};
use crate::tensor::{backward, start_graph, Tensor};

/// Compare the reverse-mode gradient of `f` at `x` against central finite
/// differences. Returns the max over coordinates of
/// |autodiff - central| / (|central| + 1e-8).
///
/// `f` must be deterministic and build its output from `x` through recorded
/// ops.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    assert!(eps > 0.0, "eps must be positive");
    x.set_requires_grad(true);
    x.zero_grad();
    let auto = {
        let _g = start_graph();
        let out = f(x)?;
        if out.numel() != 1 {
            return Err(FuseError::NonScalarRoot(out.shape()));
        }
        backward(&out)?;
        x.grad().ok_or(FuseError::NoActiveGraph)?
    };

    let base = x.to_vec();
    let shape = x.shape();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(plus, &shape)?)?.item();
        let fm = f(&Tensor::from_vec(minus, &shape)?)?.item();
        if !fp.is_finite() || !fm.is_finite() {
            return Err(FuseError::NonFinite {
                context: format!("finite_diff_check at coordinate {i}"),
            });
        }
        let central = (fp - fm) / (2.0 * eps);
        let rel = (auto[i] - central).abs() / (central.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Finite-difference check for a parameter tensor embedded in a larger model:
/// `loss_fn` recomputes the scalar loss from current parameter values.
/// Checks at most `max_coords` evenly spaced coordinates (all when `None`).
pub fn finite_diff_check_param<F>(
    loss_fn: F,
    param: &Tensor,
    eps: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    assert!(eps > 0.0, "eps must be positive");
    param.zero_grad();
    let auto = {
        let _g = start_graph();
        let out = loss_fn()?;
        if out.numel() != 1 {
            return Err(FuseError::NonScalarRoot(out.shape()));
        }
        backward(&out)?;
        param.grad().unwrap_or_else(|| vec![0.0; param.numel()])
    };

    let base = param.to_vec();
    let n = base.len();
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < n => {
            let stride = n as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    };
    let mut max_rel = 0.0f64;
    for &i in &coords {
        let mut v = base.clone();
        v[i] += eps;
        param.set_data(&v);
        let fp = loss_fn()?.item();
        v[i] = base[i] - eps;
        param.set_data(&v);
        let fm = loss_fn()?.item();
        v[i] = base[i];
        param.set_data(&v);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(FuseError::NonFinite {
                context: format!("finite_diff_check_param at coordinate {i}"),
            });
        }
        let central = (fp - fm) / (2.0 * eps);
        let rel = (auto[i] - central).abs() / (central.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn gradient_of_plain_sum_is_exact() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0], &[3]).unwrap();
        let err = finite_diff_check(|x| ops::sum_all(x), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn gradient_of_smooth_composition() {
        let x = Tensor::from_vec(vec![0.5, -0.7, 1.3, 0.2], &[4]).unwrap();
        let err = finite_diff_check(
            |x| {
                let e = ops::exp(&ops::mul_scalar(x, 0.5)?)?;
                let s = ops::silu(&e)?;
                ops::sum_all(&ops::mul(&s, &s)?)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
