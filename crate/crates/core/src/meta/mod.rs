//! Meta-training: simulated online adaptation in the inner loop, a
//! supervised outer update of the initial parameters, and the baseline
//! trainers that share its data pipeline.

mod config;
mod inner;
mod outer;
mod train;

pub use config::{InnerMode, MetaConfig, SupportMode};
pub use inner::{inner_loop, inner_loop_with, ssl_step, InnerStep, InnerTrajectory};
pub use outer::{meta_gradient, outer_grad, outer_loss, outer_step, ssl_hvp, OuterReport};
pub use train::{train, train_joint, train_vanilla, train_with, EpochHook, IterRecord, Objective};
