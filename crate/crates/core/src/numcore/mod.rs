//! Dense tensors, a reverse-mode tape, and the neural building blocks used
//! by the encoders and the hybrid-space heads.

mod gradcheck;
pub mod nn;
mod params;
mod session;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckOptions, GradCheckReport};
pub use nn::{
    affine, batchnorm, bigru, conv1d_relu_maxpool, gru_cell, pool_max, pool_mean, BatchNormParams,
    Conv1dParams, GruParams,
};
pub use params::{init_uniform, ParamId, ParamStore};
pub use session::{Mode, RunningStatUpdate, Session};
pub use tape::{BatchNormMode, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;
