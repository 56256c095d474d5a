//! Cross-modal attention distillation for video action recognition, at desk
//! scale: a flow teacher with probabilistic attention supervises the motion
//! attention of an RGB student, trained and evaluated on procedurally
//! generated clips with exact flow and boxes.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod backbone;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod parallel;
pub mod recognition;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
