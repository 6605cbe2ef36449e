//! Minimal tape-based reverse-mode autodiff and the Adam optimizer.

mod adam;
mod params;
mod tape;

pub use adam::{inv_sqrt_lr, Adam, AdamConfig};
pub use params::{uniform_matrix, GradStore, ParamId, Params};
pub use tape::{log_softmax_rows, softmax_rows, NodeId, Tape};
