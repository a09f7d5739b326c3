//! Dense tensors, tape-based reverse-mode differentiation and a
//! finite-difference gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, nudge_from_zero};
pub use tape::{softmax_cross_entropy_forward, BatchStats, Gradients, NormStats, Tape, Var};
pub use tensor::Tensor;

/// Variance regularizer inside batch norm.
pub const BN_EPS: f64 = 1e-5;

/// Weight of the old running average when folding in a batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// Whether batch norm uses batch statistics (and reports them) or running
/// averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}
