//! Meta-learned test-time adaptation for online streams whose input
//! distribution shifts over time.

pub mod data;
pub mod error;
pub mod harness;
pub mod meta;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
pub use tensor::{Dual, Scalar, SgdState, Tape, Tensor, Var};
