use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Softmax over the last axis, with max subtraction.
pub fn softmax_rows<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: "softmax_rows input".into(),
        });
    }
    let cols = *input.shape().last().expect("tensor has at least one axis");
    let mut out = input.clone();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of softmax given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let cols = *y.shape().last().expect("tensor has at least one axis");
    let mut g = grad_out.clone();
    for (gr, yr) in g.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for (gv, &yv) in gr.iter_mut().zip(yr) {
            *gv = yv * (*gv - dot);
        }
    }
    g
}
