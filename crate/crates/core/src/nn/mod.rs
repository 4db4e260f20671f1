//! Dense neural-network kernel: layer forward/backward passes, loss, SGD and
//! a finite-difference gradient oracle.

mod conv;
mod fc;
pub mod gradcheck;
mod loss;
mod lstm;
mod param;
mod pool;
mod scalar;
mod sgd;

pub use conv::{conv2d_backward, conv2d_forward};
pub use fc::{fc_backward, fc_forward};
pub use gradcheck::{finite_diff_grad, finite_diff_grad_with, max_relative_error};
pub use loss::{softmax_cross_entropy, LossOutput};
pub use lstm::{lstm_cell_backward, lstm_cell_forward, LstmGrads, LstmStepCache, LstmWeights};
pub(crate) use lstm::{
    step_backward as lstm_step_backward, step_from_projection as lstm_step_from_projection,
};
pub use param::{Parameter, ParameterSet};
pub use pool::{maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, ArgMax};
pub use scalar::Scalar;
pub use sgd::sgd_step;
