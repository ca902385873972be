//! Attention mechanisms for many-input vision-language models on a small
//! reverse-mode autodiff core.

pub mod attention;
pub mod autodiff;
pub mod decoders;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod hierview;
pub mod ltmi;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
