use super::{backward, Tensor};
use crate::error::{bail, Result};

/// `|a − n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the backward-pass gradient of `loss_fn` against central finite
/// differences for every entry of every tensor in `params`, returning the
/// worst relative error.
///
/// `loss_fn` must rebuild the graph from the current parameter values on each
/// call. Existing gradients on `params` are cleared.
pub fn grad_check<F>(mut loss_fn: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: FnMut() -> Result<Tensor>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        bail!(InvalidArgument, "eps must lie in (0, 1e-2], got {eps}");
    }
    for p in params {
        if !p.is_leaf() || !p.requires_grad() {
            bail!(InvalidArgument, "grad_check parameters must be trainable leaves");
        }
        p.zero_grad();
    }

    let root = loss_fn()?;
    let again = loss_fn()?.item();
    if root.item().to_bits() != again.to_bits() {
        bail!(CheckFailed, "loss function is not deterministic ({} vs {})", root.item(), again);
    }
    backward(&root)?;
    drop(root);

    let mut worst = 0.0f64;
    for p in params {
        let analytic = p.grad().unwrap_or_else(|| ndarray::Array2::zeros(p.shape()));
        let base = p.to_array();
        for idx in 0..base.len() {
            let (r, c) = (idx / base.ncols(), idx % base.ncols());
            let x = base[[r, c]];
            p.update_value(|v| v[[r, c]] = x + eps);
            let plus = loss_fn()?.item();
            p.update_value(|v| v[[r, c]] = x - eps);
            let minus = loss_fn()?.item();
            p.update_value(|v| v[[r, c]] = x);
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[[r, c]], numeric));
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::cell::Cell;

    #[test]
    fn quadratic_is_near_exact() {
        let x = Tensor::param(array![[0.3, -1.7], [2.5, 0.01]]);
        let c = Tensor::constant(array![[1.0, 2.0], [-3.0, 0.5]]);
        let err = grad_check(|| Ok(x.mul(&x)?.mul(&c)?.sum()), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::param(array![[1.0]]);
        for eps in [0.0, -1e-5, 0.1] {
            let r = grad_check(|| Ok(x.sum()), std::slice::from_ref(&x), eps);
            assert!(matches!(r, Err(crate::Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let x = Tensor::param(array![[1.0]]);
        let calls = Cell::new(0.0);
        let r = grad_check(
            || {
                calls.set(calls.get() + 1.0);
                Ok(x.scale(calls.get()).sum())
            },
            std::slice::from_ref(&x),
            1e-5,
        );
        assert!(matches!(r, Err(crate::Error::CheckFailed(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu at a kink point of the finite-difference stencil still reports
        // a large error, which is what a broken rule looks like.
        let x = Tensor::param(array![[0.0]]);
        let err = grad_check(|| Ok(x.relu().sum()), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-3);
        assert!((relative_error(1.0, 0.5) - 1.0 / 3.0).abs() < 1e-15);
    }
}
