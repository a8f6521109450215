//! Dense row-major tensors, a Wengert tape for reverse-mode differentiation,
//! and the handful of neural primitives the encoder is built from.
//!
//! Values live in [`Tensor`]; trainable state lives in a [`ParamStore`].
//! A forward pass records onto a [`Tape`], which is consumed by
//! [`Tape::backward`] to fill parameter gradients.

mod attention;
mod error;
mod gemm;
pub mod gradcheck;
pub mod layers;
mod ops;
pub mod optim;
pub mod params;
mod resize;
mod tape;
mod tensor;

pub use error::{NumericsError, Result};
pub use gemm::matmul_into;
pub use params::{ParamId, ParamStore, Parameter};
pub use resize::{bilinear_resize, AxisResampler};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Scalar type used for storage and arithmetic.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
/// Scalar type used for storage and arithmetic.
#[cfg(feature = "f32")]
pub type Real = f32;
