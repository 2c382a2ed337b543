//! Central finite differences, for checking tape gradients.
//!
//! Only forward evaluations are used, so this stays independent of the
//! backward pass it is meant to verify.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to every entry of every
/// tensor in `params`.
pub fn central_differences(
    params: &[Tensor<f64>],
    h: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Vec<Tensor<f64>> {
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let x0 = params[p].data()[i];
            work[p].data_mut()[i] = x0 + h;
            let up = f(&work);
            work[p].data_mut()[i] = x0 - h;
            let down = f(&work);
            work[p].data_mut()[i] = x0;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// `||a - b|| / max(||b||, floor)` over the concatenation of all tensors.
pub fn relative_error(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>], floor: f64) -> f64 {
    let mut diff = 0.0;
    let mut base = 0.0;
    for (a, b) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(b.data()) {
            diff += (x - y) * (x - y);
            base += y * y;
        }
    }
    diff.sqrt() / base.sqrt().max(floor)
}
