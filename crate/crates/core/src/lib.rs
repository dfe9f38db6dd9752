//! Desk-scale implementation of a dimension-reduced channel-attention
//! U-Net transformer for CT metal artifact reduction, together with the
//! tooling around it: an analytic cost accountant, a parallel-beam
//! metal-artifact simulator, and an Adam/L1 training and evaluation harness.

pub mod complexity;
pub mod error;
pub mod model;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
