//! Tensors, reverse-mode differentiation, layers and the Adam optimizer.

pub mod checkpoint;
mod gradcheck;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_gradient, max_relative_error};
pub use layers::{apply_layer, uniform, LayerSpec, Stack};
pub use optim::{adam_step, AdamState};
pub use tape::{ConvGeom, Gradients, Tape, Var};
pub use tensor::{DType, ParamSet, Scalar, Tensor};
