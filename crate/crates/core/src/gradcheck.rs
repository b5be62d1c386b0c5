//! Central finite-difference gradients, used to verify every analytic
//! backward pass in this crate. Runs at f64 so the truncation error of the
//! stencil dominates and a relative tolerance of 1e-3 is comfortably met by
//! correct code.

use ndarray::ArrayD;

/// Numerically differentiate the scalar function `f` with respect to every
/// element of `x` using the symmetric two-point stencil with step `h`.
pub fn central_diff(
    x: &ArrayD<f64>,
    h: f64,
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let base = x.as_slice().expect("contiguous")[idx];
        probe.as_slice_mut().expect("contiguous")[idx] = base + h;
        let up = f(&probe);
        probe.as_slice_mut().expect("contiguous")[idx] = base - h;
        let down = f(&probe);
        probe.as_slice_mut().expect("contiguous")[idx] = base;
        grad.as_slice_mut().expect("contiguous")[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative error between an analytic gradient and its
/// finite-difference counterpart.
pub fn max_relative_error(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-8))
        .fold(0.0, f64::max)
}
