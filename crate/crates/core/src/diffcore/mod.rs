//! Minimal differentiable substrate: dense, time-convolution, GRU and
//! pooling layers with hand-written backward passes, the differentiable
//! CCC objective, Adam, finite-difference checking and checkpoints.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod layers;
mod loss;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{
    dense_backward, dense_forward, gru_layer_backward, gru_layer_forward, mean_pool_time,
    mean_pool_time_backward, tc_backward, tc_forward, GruTrace,
};
pub use loss::{ccc_and_grad, ccc_loss_grad};
pub use tensor::{zeros_like, Parameter, Tensor};
