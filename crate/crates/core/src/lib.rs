pub mod admm;
pub mod corpus;
pub mod error;
pub mod grad;
pub mod model;
pub mod nas;
pub mod packio;
pub mod quant;
pub mod sensitivity;
pub mod solver;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamVector, Tensor};
