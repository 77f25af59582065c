//! Minimal dense-tensor numeric core with reverse-mode differentiation.
//!
//! Training math runs in 64-bit floats so finite-difference gradient checks
//! stay tight; checkpoints are stored in 32-bit (see the model module).
//! Only the layers the pose model needs are implemented: affine maps, ReLU,
//! softmax / log-softmax, layer normalization, inverted dropout, strided 3D
//! convolution and transposed convolution, and embedding lookup.

mod check;
mod conv;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_multi, GradCheckReport};
pub use conv::conv_transpose_output_size;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
