//! Self-supervised denoising by decomposing a noisy image into a clean
//! estimate, a signal-dependent noise map and a signal-independent noise map.

pub mod adam;
pub mod augmentation;
pub mod data;
pub mod error;
mod fastconv;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod oracle;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use network::{CvfModel, Preset};
pub use tensor::{Real, Shape, Tensor};
