//! Flexible-patch, multi-sensor vision transformer kernels.
//!
//! The crate covers pseudo-inverse patch resizing, ground-distance-aware
//! positional encodings, the token-budget sampler, a small encoder/decoder
//! model with its pretext losses, a synthetic tile generator and a toy
//! pre-training harness.

pub mod config;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod kv;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod posenc;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
