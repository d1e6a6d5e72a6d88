//! Dense matrices and reverse-mode differentiation.

pub mod gradcheck;
mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{reduce_mean, reduce_var, Axis, Gradients, NodeId, Tape};
