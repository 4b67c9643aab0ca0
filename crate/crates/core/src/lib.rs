pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod heatmap;
pub mod image;
pub mod losses;
pub mod model;
pub mod param;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
