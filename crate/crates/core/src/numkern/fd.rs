//! Central-difference gradient oracle.
//!
//! Independent of the tape: evaluates any deterministic scalar function of
//! a tensor twice per element. Runs in 64-bit only; this is the reference
//! every differentiable op is checked against.

use crate::numkern::tensor::Tensor;

/// Elementwise central-difference estimate of ∇f at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Tensor<f64>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}
