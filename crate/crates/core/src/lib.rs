pub mod architectures;
pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod error;
pub mod expressivity;
pub mod graphgen;
pub mod sequence;
pub mod signal;
pub mod spatial;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
