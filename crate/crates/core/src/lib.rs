//! Spectrally normalized ReLU networks trained offline, with super-twisting
//! adaptation of the last layer online.

pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod mlp;
pub mod oracle;
pub mod seeds;
pub mod harness;
pub mod specnorm;
pub mod sta;

pub use error::{Error, Result};
