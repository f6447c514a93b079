//! Mention embedding storage with exact or clustered maximum inner product
//! search.

mod index;
mod kmeans;

pub use index::{build_index, DenseMentionIndex, IndexConfig, IndexMode};
