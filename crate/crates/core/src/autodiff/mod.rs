//! Dense tensor arithmetic with reverse-mode differentiation.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{grad_check, numeric_gradient, relative_error, tape_gradient, FD_STEP};
pub use tape::{log_sum_exp, softmax, BatchStats, Gradients, Tape, Var};
