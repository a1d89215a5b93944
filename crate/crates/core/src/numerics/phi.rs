//! `phi1(a, δ) = (e^{aδ} − 1)/a`, the zero-order-hold input integral of a
//! scalar mode, with the limit `δ` at `a = 0`.

/// Below this |aδ| the Taylor series is used for the partial derivatives.
const SERIES_CUTOFF: f64 = 1e-3;

pub fn phi1_scalar(a: f64, delta: f64) -> f64 {
    if a == 0.0 {
        return delta;
    }
    (a * delta).exp_m1() / a
}

/// Elementwise [`phi1_scalar`].
///
/// # Panics
/// If the slices differ in length.
pub fn phi1(a: &[f64], delta: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), delta.len(), "phi1: length mismatch");
    a.iter().zip(delta).map(|(&a, &d)| phi1_scalar(a, d)).collect()
}

/// `(∂phi1/∂a, ∂phi1/∂δ)`.
pub fn phi1_partials(a: f64, delta: f64) -> (f64, f64) {
    let x = a * delta;
    let d_delta = x.exp();
    let d_a = if x.abs() < SERIES_CUTOFF {
        // δ² Σ_{k≥0} x^k / (k+2)! · (k+1)
        let d2 = delta * delta;
        d2 * (0.5 + x / 3.0 + x * x / 8.0 + x * x * x / 30.0 + x.powi(4) / 144.0)
    } else {
        (delta * d_delta - phi1_scalar(a, delta)) / a
    };
    (d_a, d_delta)
}
