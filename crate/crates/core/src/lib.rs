//! Core algorithms for shared adversarial training and universal-perturbation
//! robustness evaluation.
//!
//! Everything here is pure computation over in-memory tensors and only needs
//! `alloc`; file formats and the command-line driver live in the `sharedadv`
//! crate. Disable the default `std` feature to build for `no_std` targets.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod adversary;
pub mod data;
mod error;
pub mod net;
pub mod pareto;
pub mod rng;
pub mod robustness;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Scalar, Tensor};
