//! Central finite-difference gradient oracle.
//!
//! Used by the test suites to check every backward rule against an
//! independent numerical derivative. Only forward evaluations are performed
//! here; nothing in this module depends on any backward implementation.

use super::Tensor;

/// Numerical gradient of `eval()` with respect to every element of `t`,
/// by central differences with step `h`. `eval` must recompute the full
/// forward pass from current tensor contents.
pub fn finite_diff<F: FnMut() -> f64>(t: &Tensor, h: f64, mut eval: F) -> Vec<f64> {
    let n = t.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = t.data()[i];
        t.data_mut()[i] = orig + h;
        let plus = eval();
        t.data_mut()[i] = orig - h;
        let minus = eval();
        t.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradients. Pairs where
/// both magnitudes fall below `atol` are treated as matching zeros.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale < atol {
            continue;
        }
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}
