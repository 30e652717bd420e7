// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distiller;
pub mod encoder_state;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
