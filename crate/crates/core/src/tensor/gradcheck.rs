//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for [`relative_error`]; keeps exact-zero gradients from
/// producing 0/0.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// `|a − n| / max(|a|, |n|, 1e-6)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for one element of a leaf tensor.
pub fn central_difference<F>(x: &Tensor, index: usize, h: f64, mut f: F) -> Result<f64>
where
    F: FnMut() -> Result<f64>,
{
    let orig = x.values()[index];
    x.update_values(|v| v[index] = orig + h);
    let plus = f();
    x.update_values(|v| v[index] = orig - h);
    let minus = f();
    x.update_values(|v| v[index] = orig);
    Ok((plus? - minus?) / (2.0 * h))
}

/// Compares backprop gradients of `f(inputs)` against central differences
/// for every element of every input. Inputs must be tracked leaves.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, h: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    for x in inputs {
        if !x.is_leaf() || !x.requires_grad() {
            return Err(Error::Optimizer(
                "gradcheck inputs must be tracked leaves".into(),
            ));
        }
        x.zero_grad();
    }
    f(inputs)?.backward()?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| x.grad().unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for (x, grads) in inputs.iter().zip(&analytic) {
        for (i, &a) in grads.iter().enumerate() {
            let n = central_difference(x, i, h, || Ok(f(inputs)?.item()))?;
            report.max_rel_err = report.max_rel_err.max(relative_error(a, n));
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            report.checked += 1;
        }
        x.zero_grad();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
    }

    #[test]
    fn central_difference_of_cube() {
        let x = Tensor::param(&[1], vec![2.0]).unwrap();
        let d = central_difference(&x, 0, 1e-5, || Ok(x.values()[0].powi(3))).unwrap();
        assert!((d - 12.0).abs() < 1e-8);
        assert_eq!(x.values()[0], 2.0);
    }
}
