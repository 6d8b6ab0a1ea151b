//! Minimal deterministic tensor/autodiff engine backing the network modules.
//!
//! Sequential evaluation with a fixed node order keeps forward values,
//! gradients and optimizer updates bitwise reproducible across runs, which
//! the checkpoint-resume contract depends on.

pub mod adam;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod pose_ops;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, GradMap};
pub use layers::{BatchNorm, Lbr, Linear, Mlp, Phase};
pub use params::{ParamId, ParamStore};
pub use tape::{Tape, Value};
pub use tensor::Tensor;
