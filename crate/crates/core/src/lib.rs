//! Bi-temporal street-view damage classification.

pub mod annotation;
pub mod autograd;
pub mod backbone;
pub mod catalog;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcam;
pub mod label;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
pub use label::DamageLabel;
