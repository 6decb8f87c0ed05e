//! Central finite-difference verification helpers, shared by the unit
//! tests and the `gradcheck` CLI suite.

use super::tensor::Tensor;

/// Central finite differences of a scalar function at `x`.
pub fn fd_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = f(&Tensor::from_vec(x.shape().to_vec(), plus));
        let fm = f(&Tensor::from_vec(x.shape().to_vec(), minus));
        out[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Worst relative error between analytic and numeric gradients, with a
/// floor so near-zero pairs compare absolutely.
pub fn max_rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}
