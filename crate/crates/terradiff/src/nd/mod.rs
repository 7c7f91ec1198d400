//! Minimal f64 tensor math with reverse-mode differentiation.
//!
//! Everything in here is CPU-side, deterministic, and double precision so
//! finite-difference gradient checks can be run at tight tolerances.

pub mod ops;
pub mod tape;
pub mod tensor;

pub use tape::{Tape, VarId};
pub use tensor::Tensor;
