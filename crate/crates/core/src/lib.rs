//! Desk-scale end-to-end text spotter: detection and recognition trained
//! jointly, built on a small tape-based autodiff engine.

pub mod boxes;
pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod nn;
pub mod ops;
pub mod scalar;
pub mod tape;

pub use scalar::Scalar;
pub use tape::{Buf, Tape, Tensor, TensorError};
