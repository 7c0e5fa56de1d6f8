//! Central finite-difference gradient checking.
//!
//! Used by unit tests and the acceptance suite; the numeric side never
//! touches the backward pass, so it is an independent oracle for it.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest relative error between two gradients. Differences below 1e-7
/// are ignored: central differences at h = 1e-6 carry roundoff of roughly
/// `eps * |f| / h` (~1e-8 for loss values around 10), so smaller gaps are
/// indistinguishable from noise regardless of the true gradient.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let diff = (a - n).abs();
        if diff <= 1e-7 {
            continue;
        }
        worst = worst.max(diff / a.abs().max(n.abs()));
    }
    worst
}

/// True when every coordinate agrees within `tol` relative error (with the
/// absolute noise floor of [`max_rel_err`] for near-zero gradients).
pub fn grads_match(analytic: &[f64], numeric: &[f64], tol: f64) -> bool {
    max_rel_err(analytic, numeric) < tol
}
