//! Decoupled siamese diffusion transformer for reference-based
//! super-resolution, with a from-scratch differentiation tape and a
//! synthetic experiment harness.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod flow;
pub mod harness;
pub mod imaging;
pub mod layers;
pub mod model;
pub mod plw;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
