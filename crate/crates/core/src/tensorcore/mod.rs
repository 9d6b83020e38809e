//! Minimal reverse-mode differentiation for the desk-scale networks.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] walks it in
//! reverse and leaves gradients on every trainable leaf. Layout is NCHW
//! throughout and the default scalar is `f64` (build with the `f32` feature
//! for single precision).

mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{sgd_step, Schedule};
pub use params::{ParamId, ParamStore};
pub use tape::{NormMode, NormStats, Tape, Var, NORM_EPS};
pub use tensor::Tensor;


use thiserror::Error;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward called before any forward op was recorded for this node")]
    BackwardBeforeForward,
    #[error("backward already ran on this tape; record a new forward pass first")]
    AlreadyBackpropagated,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss does not depend on any trainable parameter")]
    Detached,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// `c = a * b + beta * c` over strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    (rsa, csa): (usize, usize),
    b: &[Real],
    (rsb, csb): (usize, usize),
    beta: Real,
    c: &mut [Real],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(a.len() > last(m, k, rsa, csa), "gemm: a too short");
        assert!(b.len() > last(k, n, rsb, csb), "gemm: b too short");
    }
    assert!(c.len() > last(m, n, rsc, csc), "gemm: c too short");
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta, c.as_mut_ptr(), rsc as isize, csc as isize,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta, c.as_mut_ptr(), rsc as isize, csc as isize,
        );
    }
}
