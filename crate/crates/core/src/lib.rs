//! Continuous normalizing flows trained by backpropagating through an ODE
//! solver, with a learnable integration horizon.

pub mod autodiff;
pub mod baseline;
pub mod cnf;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod metrics;
pub mod odeint;
pub mod optim;
pub mod plot;
pub mod rng;
pub mod temporal;
pub mod tensor;
pub mod toydata;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
