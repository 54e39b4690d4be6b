//! Scale-invariant differentially private training.
//!
//! Everything needed to train small normalized networks under per-example
//! gradient clipping and Gaussian noise, with the noise applied either to the
//! iterate itself (classic DP-SGD) or to freshly sampled weights around a
//! noise-free mean (scale-invariant DP-SGD). A Renyi-DP accountant tracks the
//! privacy budget across steps.
//!
//! The crate is `no_std`-compatible (with `alloc`); file formats, config
//! parsing, and the command line live in the companion `sidp-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod accountant;
pub mod conv;
pub mod data;
pub mod dp;
pub mod error;
pub mod model;
pub mod noisy;
pub mod norm;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
