//! Dense arrays, the reverse-mode tape, losses, ADAM and gradient checking.

mod activation;
mod adam;
mod array;
mod gradcheck;
mod graph;
mod params;

pub use activation::{sigmoid, sigmoid_cross_entropy, sigmoid_scalar, smoothed_softmax_loss, softmax, softplus};
pub use adam::{adam_step, AdamState, LrSchedule, BETA1, BETA2, EPSILON};
pub use array::Array;
pub use gradcheck::{grad_check, grad_check_subset, GradCheckReport, REL_ERR_FLOOR};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore};

/// Finite-difference step scale used throughout the test suites.
pub const GRAD_CHECK_EPS: f64 = 1e-4;
