//! Central-difference gradient verification.

use crate::error::{AvatarError, Result};
use crate::par::map_indexed;

/// Relative-error denominator floor.
const DENOM_FLOOR: f64 = 1e-8;

/// Compares an analytic gradient against central differences of `f`.
///
/// `f` must be a pure, deterministic map from the parameter vector to a
/// scalar. Checks the coordinates in `coords` (all of them when `None`) and
/// returns the maximum relative error with denominator `max(|g_k|, 1e-8)`.
pub fn finite_diff_check<F>(
    f: F,
    theta: &[f64],
    h: f64,
    grad: &[f64],
    coords: Option<&[usize]>,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    assert!(h > 0.0, "step must be positive");
    assert_eq!(grad.len(), theta.len());
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let errs = map_indexed(coords.len(), |ci| -> Result<f64> {
        let k = coords[ci];
        let mut tp = theta.to_vec();
        tp[k] = theta[k] + h;
        let fp = f(&tp)?;
        tp[k] = theta[k] - h;
        let fm = f(&tp)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AvatarError::NonFinite {
                context: format!("finite difference at coordinate {k}"),
                iteration: 0,
            });
        }
        let fd = (fp - fm) / (2.0 * h);
        Ok((fd - grad[k]).abs() / grad[k].abs().max(DENOM_FLOOR))
    });
    let mut max_err = 0.0f64;
    for e in errs {
        max_err = max_err.max(e?);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_checks_out() {
        let theta = vec![0.3, -1.7, 2.5, 0.0];
        let f = |t: &[f64]| Ok(t.iter().map(|v| v * v).sum());
        let grad: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(f, &theta, 1e-5, &grad, None).unwrap();
        assert!(err <= 1e-6, "error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = vec![1.0, 2.0];
        let f = |_: &[f64]| Ok(42.0);
        let grad = vec![0.0, 0.0];
        let err = finite_diff_check(f, &theta, 1e-5, &grad, None).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_output_names_coordinate() {
        let theta = vec![1.0];
        let f = |t: &[f64]| Ok((t[0] - 1.0).ln());
        let grad = vec![0.0];
        // f(theta - h) takes the log of a negative number -> NaN.
        let res = finite_diff_check(f, &theta, 1e-5, &grad, None);
        assert!(matches!(res, Err(AvatarError::NonFinite { .. })));
    }
}
