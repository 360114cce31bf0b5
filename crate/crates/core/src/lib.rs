//! Scalp and hair disease image classification.
//!
//! A small convolutional network engine written from scratch: dense tensors,
//! image pre-processing, sequential CNN layers with hand-written backward
//! passes, Adam, dataset loading/augmentation, training, evaluation metrics and
//! a checksummed model file format.
//!
//! Inner loops over batch samples run through [`exec::Exec`], which uses rayon
//! when the `parallel` feature is enabled (the default) and plain iteration
//! otherwise. Both modes produce bit-identical results.

pub mod data;
pub mod error;
pub mod exec;
pub mod imageproc;
pub mod metrics;
pub mod model_io;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::{Real, Tensor};
