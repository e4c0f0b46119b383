//! Dense tensors, reverse-mode autodiff and SGD.

mod layers;
mod sgd;
mod tape;
mod tensor;

pub use layers::{Conv2d, Dense, ImageShape, Mlp};
pub use sgd::{grad_norm, sgd_step, ClipMode, SgdConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
