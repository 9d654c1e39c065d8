//! Independent numerical oracles used to verify the engine: central finite
//! differences for gradients and brute-force Jacobians for log-determinants.
//!
//! Nothing here touches the tape's backward pass; these functions only call
//! the function under test at perturbed points.

use crate::linalg;
use crate::tensor::{Scalar, Tensor};

/// Central-difference gradient of a scalar function: (f(x+εeᵢ) − f(x−εeᵢ)) / 2ε.
pub fn finite_diff_grad<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    assert!(eps > T::zero(), "finite_diff_grad: eps must be positive");
    let two = T::from_f64(2.0);
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (two * eps);
    }
    grad
}

/// Dense Jacobian of a vector function by central differences; rows index
/// outputs, columns index inputs.
pub fn finite_diff_jacobian<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>,
    x: &Tensor<T>,
    eps: T,
) -> Vec<T> {
    assert!(eps > T::zero());
    let two = T::from_f64(2.0);
    let n = x.numel();
    let m = f(x).numel();
    let mut jac = vec![T::zero(); m * n];
    let mut probe = x.clone();
    for j in 0..n {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + eps;
        let hi = f(&probe);
        probe.data_mut()[j] = orig - eps;
        let lo = f(&probe);
        probe.data_mut()[j] = orig;
        for i in 0..m {
            jac[i * n + j] = (hi.data()[i] - lo.data()[i]) / (two * eps);
        }
    }
    jac
}

/// log|det J_f(x)| via the finite-difference Jacobian; `f` must preserve
/// dimension.
pub fn brute_force_logdet<T: Scalar>(
    f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>,
    x: &Tensor<T>,
    eps: T,
) -> T {
    let n = x.numel();
    let jac = finite_diff_jacobian(f, x, eps);
    assert_eq!(jac.len(), n * n, "brute_force_logdet: map must preserve dimension");
    linalg::det(&jac, n).abs().ln()
}

/// Relative error |a − b| / max(|a|, |b|, 1); near-zero values compare
/// absolutely.
pub fn rel_err<T: Scalar>(a: T, b: T) -> f64 {
    let (a, b) = (a.to_f64(), b.to_f64());
    let denom = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() / denom
}

/// Largest per-coordinate relative error between two tensors, with an
/// absolute floor so near-zero entries compare absolutely.
pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
