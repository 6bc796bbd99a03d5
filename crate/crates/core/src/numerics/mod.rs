//! Dense tensors and a reverse-mode gradient tape.

pub mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{cst, inverse_permutation, numel, permute_index, strides, DType, Scalar, Tensor};


/// Named tensors, ordered by name.
pub type ParamMap<T> = std::collections::BTreeMap<String, Tensor<T>>;
