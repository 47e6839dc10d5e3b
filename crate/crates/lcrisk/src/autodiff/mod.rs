//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every learnable computation in the toolkit runs through [`Tape`]: forward
//! operations are recorded as they execute and [`Tape::backward`] replays them
//! in reverse. Tapes are cheap and rebuilt per forward pass, which keeps
//! gradients available at intermediate activations (needed for attribution)
//! without any retain-graph machinery.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error};
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::{Result as TensorResult, Tensor, TensorError};
