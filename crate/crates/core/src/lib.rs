//! Bit-exact FP8/BF16 numerics emulation and the building blocks of a small
//! low-precision training stack: delayed and per-channel scaling, SwiGLU and
//! Smooth-SwiGLU blocks, Adam with FP8 moments, and training diagnostics.

pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod optimizer;
pub mod scaling;
pub mod swiglu;
pub mod tensor;

pub use error::{Error, Result};
pub use numerics::{decode, encode, enumerate_values, CodePoint, Format, FormatSpec, OverflowMode};
pub use tensor::Tensor;
