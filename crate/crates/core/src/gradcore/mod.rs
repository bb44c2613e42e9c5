//! Reverse-mode automatic differentiation over dense matrices, with a
//! per-node Jacobian override used for straight-through gradients.

mod check;
mod tape;

pub use check::{finite_diff_check, finite_diff_check_sampled, overridden_inputs};
pub use tape::{
    softmax_row, Aux, FusedBackward, FusedGrads, FusedInput, FusedOp, Gradients, JacobianMode,
    JacobianOverride, NodeId, Op, Tape, Unary,
};

#[cfg(test)]
mod tests;
