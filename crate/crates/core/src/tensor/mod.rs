//! Tensors, reverse-mode differentiation, initialization, optimization and
//! the named-tensor file format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod init;
mod lstm;
mod params;
mod rng;
mod scalar;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use adam::{adam_update, AdamConfig, AdamState, Moments};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use init::{init_params, Init};
pub use lstm::lstm_step;
pub use params::{Group, Param, ParamId, ParamStore};
pub use rng::{Rng, Stream};
pub use scalar::Scalar;
pub use tape::{smooth_l1, Activation, BatchStats, Grads, Tape, Var};
pub use tensor::Tensor;
