//! Error-certified adaptive solver for monoenergetic radiative transfer on a
//! rectangle with transport directions on the unit circle.

// index loops mirror the formulas; `!(x > 0.0)` also rejects NaN
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod angular;
pub mod bench;
pub mod dense;
pub mod dpg;
mod error;
pub mod grid;
pub mod iteration;
pub mod kernel;
pub mod mesh;
pub mod optics;
pub mod phase;
pub mod quad;
pub mod reference;
pub mod selftest;
pub mod transfer;

pub use error::{Error, Result};
