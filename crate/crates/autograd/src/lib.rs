//! Dense f64 tensors, a reverse-mode tape, a parameter store and Adam.

mod error;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use params::{Param, ParamStore};
pub use tensor::{kl_div, lstm_cell, sigmoid, symmetric_kl, LstmWeights, Tensor, EPS_KL, LAYER_NORM_EPS};
