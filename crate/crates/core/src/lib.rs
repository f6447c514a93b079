//! Virtual knowledge base reasoning: a corpus of entity mentions is indexed
//! as sparse entity→mention matrices plus a dense mention index, and
//! multi-hop questions are answered by repeatedly following relations
//! expressed as dense query vectors.

pub mod corpus;
pub mod dense_index;
pub mod encoders;
mod error;
pub mod featurize;
pub mod pipeline;
pub mod reasoner;
pub mod scaling;
pub mod sparse;
pub mod text;
pub mod training;

pub use error::{Error, Result};
