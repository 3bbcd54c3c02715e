//! The dual-branch network, its parameter partition and checkpoint format.

pub mod checkpoint;
mod convnet;
mod params;

pub use convnet::{argmax, rotate90, rotation_batch, ConvNet, ConvNetSpec, ROTATIONS};
pub use params::{BitRepr, Bound, Group, Param, ParamBundle};
