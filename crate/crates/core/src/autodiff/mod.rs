//! Reverse-mode automatic differentiation over small dense tensors.

mod adam;
pub mod checkpoint;
mod mlp;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use mlp::{forward_mlp, Activation, BoundMlp, Layer, MlpParams, OutputActivation, Parameters};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
