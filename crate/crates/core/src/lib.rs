//! Scale-variant iris authentication pipeline: anchor-based iris detection,
//! zero-padding normalization to a fixed square, and a compact CNN recognizer
//! with a stacked adaptive-average-pooling head trained with AMSGrad under
//! k-fold cross validation.

pub mod archive;
pub mod config;
pub mod datagen;
pub mod detect;
pub mod gradsuite;
mod error;
pub mod harness;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod recognize;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{PadMode, Tensor};
