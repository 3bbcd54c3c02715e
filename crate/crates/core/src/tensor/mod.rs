//! Dense tensors, reverse-mode differentiation and plain SGD.

mod dense;
mod optim;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use optim::{apply_update, SgdState};
pub use scalar::{Dual, Scalar, Storable};
pub use tape::{Conv2dOpts, Gradients, Tape, Var};
