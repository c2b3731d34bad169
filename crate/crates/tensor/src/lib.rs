//! Dense f64 tensors and a reverse-mode tape.
//!
//! The primitive set is exactly what the bracket-generation transformer needs:
//! matmul, elementwise arithmetic with trailing-axis broadcasting, clipping,
//! softmax, RMS normalization, SiLU, reductions, L1/L2 losses, masked
//! multi-head attention and rotary rotation. Shapes never broadcast beyond a
//! trailing-axis vector; reshapes are explicit.

mod attention;
pub mod gradcheck;
mod tape;
mod tensor;

pub use attention::{AttnMask, RotaryAngles};
pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
