//! Numerical plumbing: tensors, the differentiation tape, networks, Adam.

pub mod adam;
pub mod mlp;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamState};
pub use mlp::{mlp_forward, Activation, Layer, Mlp};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
