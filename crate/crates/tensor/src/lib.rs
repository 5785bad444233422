//! Reverse-mode automatic differentiation over dense `f32`/`f64` tensors, with the
//! layers needed by a range-image segmentation network: grouped and dilated 2-D
//! convolution, batch normalization, bilinear upsampling, gathers and a
//! class-weighted cross-entropy.

mod array;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod real;

pub use array::Array;
pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, PendingStats, Var};
pub use kernels::conv::Conv2dOptions;
pub use params::{BufferId, Buffer, HasParams, ParamId, ParamStore, Parameter, RunningStats, SgdConfig};
pub use real::Real;
