//! Dense tensors, a reverse-mode tape, gradient checking and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod param;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{LayerNorm, Linear};
pub use ops::Activation;
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use scalar::{mac_count, reset_mac_count, Scalar};
pub use tape::{BackwardCtx, Gradients, Op, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
