//! Dual-branch (RGB + log-magnitude spectrum) forgery detector built on a
//! small reverse-mode autodiff engine, together with the synthetic corpus,
//! training, evaluation, ablation and gradient-check tooling around it.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod tensor;

pub use error::{Error, Result};
