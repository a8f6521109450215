//! Multi-resolution, multi-modal masked autoencoder.

pub mod checkpoint;
pub mod corpus;
pub mod diagnostics;
pub mod encodings;
pub mod error;
pub mod flops;
pub mod mae;
pub mod model;
pub mod projector;
pub mod resampler;
pub mod sample;
pub mod temporal;
pub mod tensorfile;
pub mod train;

pub use error::{Error, Result};
