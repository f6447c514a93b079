use serde::{Deserialize, Serialize};

use super::tfidf::{surface_vector, HashedTfidfModel};
use crate::corpus::{Corpus, EntityId};
use crate::error::{Error, Result};
use crate::sparse::{RaggedBuilder, RaggedMatrix, SparseVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoocConfig {
    /// Scores `G(e)·F(m)` must exceed this to create an entry.
    pub epsilon: f64,
    /// Maximum mentions kept per entity row.
    pub mu: usize,
    /// Only mentions in this many best-matching passages are considered.
    pub top_paragraphs: usize,
}

impl Default for CoocConfig {
    fn default() -> Self {
        CoocConfig {
            epsilon: 0.05,
            mu: 50,
            top_paragraphs: 50,
        }
    }
}

impl CoocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mu == 0 || self.top_paragraphs == 0 {
            return Err(Error::Config("mu and top_paragraphs must be >= 1".into()));
        }
        if !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be finite".into()));
        }
        Ok(())
    }
}

/// Inverted postings `bucket -> [(item, weight)]` over a set of sparse
/// vectors, for scoring a query against all of them without a dense pass.
#[derive(Debug, Clone)]
struct Postings {
    offsets: Vec<usize>,
    items: Vec<(u32, f64)>,
    n_items: usize,
}

impl Postings {
    fn build(n_buckets: usize, vectors: &[SparseVector]) -> Self {
        let mut counts = vec![0usize; n_buckets + 1];
        for v in vectors {
            for &b in v.indices() {
                counts[b as usize + 1] += 1;
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut cursor = counts.clone();
        let mut items = vec![(0u32, 0.0); counts[n_buckets]];
        for (id, v) in vectors.iter().enumerate() {
            for (b, w) in v.iter() {
                items[cursor[b as usize]] = (id as u32, w);
                cursor[b as usize] += 1;
            }
        }
        Postings {
            offsets: counts,
            items,
            n_items: vectors.len(),
        }
    }

    /// Dot products with every item that shares a bucket with `query`.
    /// Returns `(item, score)` in ascending item order.
    fn score(&self, query: &SparseVector, scratch: &mut Vec<f64>) -> Vec<(u32, f64)> {
        scratch.clear();
        scratch.resize(self.n_items, 0.0);
        let mut touched = Vec::new();
        for (b, q) in query.iter() {
            let b = b as usize;
            for &(item, w) in &self.items[self.offsets[b]..self.offsets[b + 1]] {
                if scratch[item as usize] == 0.0 {
                    touched.push(item);
                }
                scratch[item as usize] += q * w;
            }
        }
        touched.sort_unstable();
        touched.dedup();
        touched
            .into_iter()
            .map(|i| (i, scratch[i as usize]))
            .collect()
    }
}

/// Entity surface vectors `G(e)` with postings, used for question linking.
#[derive(Debug, Clone)]
pub struct SurfaceIndex {
    model: HashedTfidfModel,
    postings: Postings,
}

impl SurfaceIndex {
    pub fn new(model: &HashedTfidfModel, corpus: &Corpus) -> Self {
        let vectors: Vec<SparseVector> = corpus
            .entities()
            .iter()
            .map(|e| surface_vector(model, e))
            .collect();
        SurfaceIndex {
            model: model.clone(),
            postings: Postings::build(model.n_buckets(), &vectors),
        }
    }

    /// Best `n` entities by cosine between the question's TFIDF vector and
    /// their surface vectors; only positive scores, ties to the lower id.
    pub fn top_matches(&self, tokens: &[String], n: usize) -> Vec<(EntityId, f64)> {
        let q = self.model.vector(tokens);
        let mut scratch = Vec::new();
        let mut scored: Vec<(u32, f64)> = self
            .postings
            .score(&q, &mut scratch)
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(n);
        scored
    }
}

/// `A_{E→M}`: entry `(e, m)` holds `G(e)·F(m)` when it exceeds ε, restricted
/// to mentions in the `top_paragraphs` best passages for `e` and to the μ
/// best such mentions (ties to the lower mention id).
pub fn build_entity_mention_matrix(
    model: &HashedTfidfModel,
    corpus: &Corpus,
    config: &CoocConfig,
) -> Result<RaggedMatrix> {
    config.validate()?;
    let passages: Vec<SparseVector> = corpus
        .documents()
        .iter()
        .map(|d| model.vector(&d.tokens))
        .collect();
    let postings = Postings::build(model.n_buckets(), &passages);
    let mut builder = RaggedBuilder::new(corpus.n_mentions());
    let mut scratch = Vec::new();
    for entity in corpus.entities() {
        let g = surface_vector(model, entity);
        let mut docs: Vec<(u32, f64)> = postings
            .score(&g, &mut scratch)
            .into_iter()
            .filter(|&(_, s)| s > config.epsilon)
            .collect();
        docs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        docs.truncate(config.top_paragraphs);
        let mut row: Vec<(u32, f64)> = docs
            .iter()
            .flat_map(|&(d, s)| {
                corpus
                    .mentions_in_doc(d)
                    .iter()
                    .map(move |m| (m.mention_id, s))
            })
            .collect();
        row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        row.truncate(config.mu);
        row.sort_by_key(|&(m, _)| m);
        builder.push_row(row)?;
    }
    Ok(builder.finish())
}

/// `B_{M→E}`: one unit entry per mention at its linked entity.
pub fn build_coref_matrix(corpus: &Corpus) -> RaggedMatrix {
    let mut builder = RaggedBuilder::new(corpus.n_entities());
    for m in corpus.mentions() {
        builder
            .push_row([(m.entity_id, 1.0)])
            .expect("corpus mentions refer to known entities");
    }
    builder.finish()
}
