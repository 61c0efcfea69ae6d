//! Central finite-difference gradient checks.

use super::Tensor;
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of [`rel_error`]; near-zero gradients are compared
/// absolutely against `REL_FLOOR * tolerance`.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference(f: &mut impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, i: usize, h: f64) -> Result<f64> {
    let mut p = x.clone();
    p.data_mut()[i] += h;
    let up = f(&p)?;
    p.data_mut()[i] -= 2.0 * h;
    let down = f(&p)?;
    Ok((up - down) / (2.0 * h))
}

/// Largest [`rel_error`] between `grad` and central differences of `f` at
/// every coordinate of `x`.
pub fn max_rel_error(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, grad: &Tensor) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let n = central_difference(&mut f, x, i, FD_STEP)?;
        worst = worst.max(rel_error(grad.data()[i], n));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_matches_closed_form() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let grad = x.map(|v| 3.0 * v * v);
        let err = max_rel_error(|t| Ok(t.data().iter().map(|v| v * v * v).sum()), &x, &grad).unwrap();
        assert!(err < 1e-8, "{err}");
        let wrong = x.map(|v| 3.0 * v * v + 1e-2);
        assert!(max_rel_error(|t| Ok(t.data().iter().map(|v| v * v * v).sum()), &x, &wrong).unwrap() > 1e-4);
    }
}
