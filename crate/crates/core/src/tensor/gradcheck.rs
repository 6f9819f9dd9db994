//! Central finite differences for checking reverse-mode gradients.
//!
//! These helpers only evaluate forward functions, so they stay independent
//! of the tape's backward rules.

use super::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn numerical_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both are exactly zero.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic.sub(numeric).expect("gradient shapes agree").norm();
    let scale = analytic.norm().max(numeric.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numerical_gradient(|t| t.sum_sq(), &x, DEFAULT_STEP);
        assert!(relative_error(&x.scale(2.0), &g) < 1e-9);
    }
}
