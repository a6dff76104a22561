//! Omni-range attention for semantic segmentation at desk scale.
//!
//! The crate implements basic dot-product self-attention, a Middle-Range
//! branch that restricts attention to a grid of local patches, and a
//! Reweighed Long-Range branch that gates attended features by their global
//! attention contribution. A small tape-based reverse-mode engine makes every
//! path gradient-checkable, and the harness module trains the assembled
//! network on synthetic segmentation data.
//!
//! See the `examples/` directory for one runnable example per capability.

#![allow(clippy::needless_range_loop)]

pub mod analysis;
pub mod attention;
pub mod error;
pub mod harness;
pub mod losses;
pub mod mr;
pub mod network;
pub mod rlr;
pub mod tensor;

pub use error::{OrdError, Result};
pub use tensor::{Tape, Tensor, Value};
