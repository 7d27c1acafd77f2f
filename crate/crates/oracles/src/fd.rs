//! Finite-difference gradients. Central differences are the primary oracle;
//! the one-sided variant exists to cross-check the oracle itself.

/// Central-difference gradient of `f` at `x`: `(f(x+h) - f(x-h)) / 2h` per
/// coordinate. O(2 |x|) evaluations, so only sensible at tiny sizes.
pub fn fd_gradient_central(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * step));
    }
    grad
}

/// One-sided forward difference, used only to cross-check the central oracle.
pub fn fd_gradient_forward(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let base = f(x);
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        grad.push((f(&probe) - base) / step);
        probe[i] = x[i];
    }
    grad
}
