//! Finite-difference gradient verification.
//!
//! Checks run at f64 with central differences: analytic gradients from the
//! tape are compared against `(f(x+ε) − f(x−ε)) / 2ε` element by element.

use rand::Rng;

use super::{Element, Tensor};

/// Central-difference step used throughout the gradient suite.
pub const FD_EPS: f64 = 1e-3;
/// Relative-error bound for f64 checks.
pub const FD_TOL: f64 = 1e-4;

/// Relative error with a floor so near-zero gradient pairs compare on an
/// absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Check analytic gradients of `loss` against central differences for every
/// element of every input tensor. `loss(inputs)` must be a pure function;
/// `analytic` holds one gradient tensor per input in the same order.
///
/// Returns the maximum relative error, or an error string naming the first
/// offending element past `tol`.
pub fn check_against_fd(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss: impl Fn(&[Tensor<f64>]) -> f64,
    eps: f64,
    tol: f64,
) -> Result<f64, String> {
    assert_eq!(inputs.len(), analytic.len());
    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in analytic.iter().enumerate() {
        assert_eq!(inputs[ti].shape(), grad.shape(), "gradient shape mismatch");
        for ei in 0..inputs[ti].len() {
            let orig = inputs[ti].data()[ei];
            probe[ti].data_mut()[ei] = orig + eps;
            let up = loss(&probe);
            probe[ti].data_mut()[ei] = orig - eps;
            let down = loss(&probe);
            probe[ti].data_mut()[ei] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = grad.data()[ei];
            let err = rel_err(an, fd);
            if err > tol {
                return Err(format!(
                    "input {ti} element {ei}: analytic {an:.9e} vs fd {fd:.9e} (rel err {err:.3e})"
                ));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// A deterministic tensor of uniform values in `(lo, hi)`.
pub fn random_tensor<T: Element>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..len)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect(),
    )
    .expect("random tensor")
}
