//! Two-stage curriculum pre-training for RGB-D vision transformers, desk scale.
//!
//! Stage 1 aligns RGB and depth patches with a symmetric InfoNCE loss on a
//! shared encoder. Stage 2 initializes modality-specific encoders from the
//! stage-1 weights and trains masked depth reconstruction plus a
//! noise-prediction objective conditioned on a sinusoidal noise-level
//! embedding. Everything runs on a small reverse-mode autodiff tape over
//! row-major tensors, with a finite-difference oracle for every gradient path.
//!
//! The crate is `no_std`-compatible (`alloc` required); all file formats,
//! IO, and the command-line interface live in the companion `tandem-cli`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use numerics::element::Element;
pub use numerics::rng::SeededRng;
pub use numerics::tensor::Tensor;
