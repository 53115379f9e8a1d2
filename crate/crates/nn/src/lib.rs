//! Minimal CPU tensor engine: NCHW tensors, a tape-based autodiff graph,
//! convolution/normalisation layers, optimisers and checkpointing.
//!
//! Execution is single-threaded and deterministic; two runs with the same
//! inputs produce bit-identical outputs and gradients.

pub mod checkpoint;
mod error;
mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
mod params;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{softmax_channels_into, Grads, Graph, NormStats, Var};
pub use kernels::ConvGeom;
pub use params::{init_tensor, Buffer, BufferId, Init, Param, ParamId, ParamStore};
pub use tensor::Tensor;
