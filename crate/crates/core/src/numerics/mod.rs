//! Dense tensors, trainable parameters and tape-based differentiation.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, ParamCheck};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{gelu, gelu_grad, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln σ(x)`
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Row-wise softmax of a matrix outside any tape.
pub fn softmax_rows(x: &Tensor) -> crate::Result<Tensor> {
    let (m, n) = x.expect_matrix("softmax_rows")?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(n.max(1)) {
        softmax_in_place(row);
    }
    Tensor::new(vec![m, n], out)
}
