//! Minimal differentiable compute core and the xNet model.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod ops;
mod tensor;

pub use adam::Adam;
pub use model::{loss_and_grads, ForwardCache, HeadKind, LayerOutput, ModelConfig, Param, Targets, XNetModel};
pub use tensor::Tensor;
