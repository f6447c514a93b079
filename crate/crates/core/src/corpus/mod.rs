//! Corpus data model, entity linking and the synthetic dataset generator.

mod io;
mod linker;
mod synthetic;
mod types;

pub use io::{ingest_corpus, read_kb, read_questions, write_corpus, write_kb, write_questions};
pub use linker::{link_mentions, LinkMode, Linker, QuestionLinker, SpanMatch};
pub use synthetic::{
    generate_synthetic_dataset, parse_relation_path, SyntheticConfig, SyntheticDataset,
};
pub use types::*;

#[cfg(test)]
mod tests;
