//! Hashed unigram/bigram TFIDF and the entity→mention and mention→entity
//! matrices built from it.

mod cooc;
mod tfidf;

pub use cooc::{build_coref_matrix, build_entity_mention_matrix, CoocConfig, SurfaceIndex};
pub use tfidf::{
    fit_tfidf, passage_vector, surface_vector, HashedTfidfModel, TfidfConfig,
};
