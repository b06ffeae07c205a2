//! L1 input-Jacobian penalty ("double backpropagation") with FGSM adversarial
//! training for MNIST classifiers.

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod jacobian;
pub mod loss;
pub mod nn;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
