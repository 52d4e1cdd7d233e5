//! Analytic backward passes, a finite-difference checker and a toy trainer.

pub mod backward;
pub mod check;
pub mod toy;

pub use backward::{
    backward_layernorm, backward_length_agnostic_power_softmax, backward_lipschitz_power_softmax,
    backward_power_softmax, backward_softmax_from_output, backward_stable_power_softmax, block_backward,
    normalize_row_backward, BlockGrads,
};
pub use check::{grad_check, rel_err, smooth_input, BlockOp, Differentiable, GradResult, Identity, RowOp, STEP};
pub use toy::{toy_train, Task, ToyModel, ToyTrainConfig, ToyTrainResult};
