//! Minimal differentiable numerical core: dense matrices, forward kernels,
//! a recording tape with reverse-mode gradients, named parameter storage,
//! checkpoints, and a finite-difference gradient checker.

mod checkpoint;
mod gradcheck;
mod matrix;
pub mod ops;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    analytic_grads, compare_with_finite_differences, grad_check, relative_error, GradCheckOptions,
    GradCheckReport, REL_ERROR_FLOOR,
};
pub use matrix::Matrix;
pub use ops::{dense, scaled_dot_attention, sigmoid, softmax};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var};

pub(crate) use tape::focal_row;
