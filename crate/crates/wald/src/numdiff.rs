//! Central finite differences for verifying analytic gradients.
//!
//! These helpers only ever call the supplied forward closure; they know
//! nothing about any backward pass, which is what makes them usable as an
//! independent oracle in the gradient test suites.

/// Central difference d f / d x_i for every entry of `x`.
pub fn central_diff<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let hi = f(&probe);
        probe[i] = orig - step;
        let lo = f(&probe);
        probe[i] = orig;
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Largest relative error between an analytic gradient and its finite
/// difference estimate: `|a - n| / max(|a|, |n|, scale)`.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], scale: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(scale))
        .fold(0.0, f64::max)
}

/// Step size that balances truncation against rounding for f64 forwards.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor used in relative-error denominators so near-zero gradients do not
/// blow the ratio up on rounding noise.
pub const DEFAULT_SCALE: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        // f(x) = sum x_i^2, df/dx_i = 2 x_i
        let x = vec![0.3, -1.2, 2.5];
        let g = central_diff(&x, DEFAULT_STEP, |v| v.iter().map(|a| a * a).sum());
        let expected: Vec<f64> = x.iter().map(|a| 2.0 * a).collect();
        assert!(max_rel_error(&expected, &g, DEFAULT_SCALE) < 1e-8);
    }
}
