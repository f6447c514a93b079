//! Sparse vectors, ragged matrices and the kernels of the follow operation.

mod ops;
mod ragged;
mod vector;

pub use ops::{
    elementwise_product, softmax_vjp, sparse_softmax, sparse_softmax_backward,
    spvec_ragged_matmul, spvec_ragged_matmul_binary, topk_truncate,
};
pub use ragged::{RaggedBuilder, RaggedMatrix};
pub use vector::SparseVector;

#[cfg(test)]
mod tests;
