//! Tape-based reverse-mode automatic differentiation over dense CPU tensors.
//!
//! The op set is deliberately coarse: convolutions, sparse gathers and
//! volume compositing are single nodes with hand-written adjoints, which
//! keeps small image and voxel models fast on one core.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod sparse;
mod tensor;

pub use graph::{Grads, Graph, Unary, Var};
pub use optim::Adam;
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
pub use sparse::{SparseMap, SparseMapBuilder};
pub use tensor::Tensor;
