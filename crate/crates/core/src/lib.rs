pub mod autodiff;
pub mod backbone;
pub mod container;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod keypoints;
pub mod lifting;
pub mod rigging;
pub mod rng;
pub mod structure;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
