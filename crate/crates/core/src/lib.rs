//! Surrogate modeling of maximum water levels with a U-Net trained on
//! randomly sampled raster patches and applied to whole domains by tiling.

pub mod convnet;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod metrics;
pub mod optim;
pub mod patches;
pub mod raster;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
