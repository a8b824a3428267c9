//! Instance-specific detector building blocks on a small tensor/autodiff core.
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, finite-difference gradient checks
//! * [`layers`]: convolution, batch/instance normalization, SiLU, softmax
//! * [`attention`]: patch-channel reconstruction, full-channel global self-attention, reassembly
//! * [`isb`]: baseline bottleneck and the instance-specific bottleneck
//! * [`head`]: baseline decoupled head and the instance-specific asymmetric head
//! * [`profiler`]: analytic parameter/FLOP counting and scale presets
//! * [`toytrain`]: synthetic grid-detection task and SGD trainer

pub mod attention;
pub mod error;
pub mod head;
pub mod isb;
pub mod layers;
pub mod profiler;
pub mod tensor;
pub mod toytrain;

pub use error::{Error, Result};
pub use tensor::{backward, Gradients, Precision, Tensor};
