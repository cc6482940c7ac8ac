pub mod ablation;
pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
