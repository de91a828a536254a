//! Unsupervised low-light image enhancement with a trainable camera response
//! model on top of a tiny illumination-estimation network.

pub mod autodiff;
pub mod cem;
pub mod cli;
pub mod error;
pub mod iem;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
