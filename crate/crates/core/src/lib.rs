pub mod autodiff;
mod binio;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{AmelError, Result};
pub use tensor::Tensor;
