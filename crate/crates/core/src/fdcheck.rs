//! Central finite-difference gradient checking.
//!
//! Used by both the test suites and the `verify` command. The comparison is
//! relative with an absolute floor: `|a - f| <= rtol * max(|f|, floor)`. The
//! floor keeps near-zero gradients from amplifying finite-difference noise
//! into spurious relative errors.

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_RTOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-3;

/// Central finite differences of a scalar function at `x`, one coordinate at
/// a time: `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(&point);
        point[i] = orig - h;
        let minus = f(&point);
        point[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Worst relative error between an analytic gradient and a reference,
/// using the floored denominator described above.
pub fn max_rel_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &r)| (a - r).abs() / r.abs().max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_of_quadratic() {
        // f(x) = sum x_i^2, grad = 2x
        let x = [1.0, -2.0, 0.5];
        let g = central_diff(|p| p.iter().map(|v| v * v).sum(), &x, FD_STEP);
        let expect = [2.0, -4.0, 1.0];
        assert!(max_rel_error(&expect, &g, GRAD_FLOOR) < 1e-8);
    }
}
