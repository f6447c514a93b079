//! Exact surface-form entity linking for passages and questions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::types::*;
use crate::error::{Error, Result};
use crate::featurize::SurfaceIndex;
use crate::sparse::SparseVector;
use crate::text::tokenize;

/// A matched span `start..=end` in a token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanMatch {
    pub start: u32,
    pub end: u32,
    pub entity_id: EntityId,
}

/// Case-insensitive exact matcher over surface forms and aliases.
///
/// Overlaps are resolved longest match first, then leftmost. A token
/// sequence shared by several entities links to the lowest entity id.
#[derive(Debug, Clone)]
pub struct Linker {
    forms: HashMap<Vec<String>, EntityId>,
    max_len: usize,
}

impl Linker {
    pub fn new(entities: &[Entity]) -> Result<Self> {
        if entities.is_empty() {
            return Err(Error::Contract("linker needs a non-empty lexicon".into()));
        }
        let mut forms: HashMap<Vec<String>, EntityId> = HashMap::new();
        for e in entities {
            for form in std::iter::once(&e.surface_form).chain(&e.aliases) {
                let toks = tokenize(form);
                if toks.is_empty() {
                    continue;
                }
                forms
                    .entry(toks)
                    .and_modify(|id| *id = (*id).min(e.entity_id))
                    .or_insert(e.entity_id);
            }
        }
        let max_len = forms.keys().map(Vec::len).max().unwrap_or(0);
        Ok(Linker { forms, max_len })
    }

    /// All accepted, non-overlapping matches in `tokens`, ordered by start.
    pub fn find(&self, tokens: &[String]) -> Vec<SpanMatch> {
        let mut candidates = Vec::new();
        for start in 0..tokens.len() {
            let longest = self.max_len.min(tokens.len() - start);
            for len in 1..=longest {
                if let Some(&entity_id) = self.forms.get(&tokens[start..start + len]) {
                    candidates.push((len, start, entity_id));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut taken = vec![false; tokens.len()];
        let mut accepted = Vec::new();
        for (len, start, entity_id) in candidates {
            if taken[start..start + len].iter().any(|&t| t) {
                continue;
            }
            taken[start..start + len].iter_mut().for_each(|t| *t = true);
            accepted.push(SpanMatch {
                start: start as u32,
                end: (start + len - 1) as u32,
                entity_id,
            });
        }
        accepted.sort_by_key(|m| m.start);
        accepted
    }
}

/// Links every document; mention ids follow `(doc_id, start)` order.
pub fn link_mentions(docs: &[Document], lexicon: &[Entity]) -> Result<Vec<Mention>> {
    let linker = Linker::new(lexicon)?;
    let mut order: Vec<&Document> = docs.iter().collect();
    order.sort_by_key(|d| d.doc_id);
    let mut mentions = Vec::new();
    for doc in order {
        for m in linker.find(&doc.tokens) {
            mentions.push(Mention {
                mention_id: mentions.len() as MentionId,
                entity_id: m.entity_id,
                doc_id: doc.doc_id,
                start: m.start,
                end: m.end,
            });
        }
    }
    Ok(mentions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LinkMode {
    /// One-hot on the matched entity with the fewest corpus mentions.
    LeastFrequentExact,
    /// Distribution over the `n` best TFIDF matches of the surface forms.
    TfidfTopk { n: usize },
}

/// Question-side entity linking producing the initial distribution `Z₀`.
#[derive(Debug, Clone)]
pub struct QuestionLinker {
    linker: Linker,
    frequencies: Vec<u32>,
    surfaces: SurfaceIndex,
}

impl QuestionLinker {
    pub fn new(linker: Linker, frequencies: Vec<u32>, surfaces: SurfaceIndex) -> Self {
        QuestionLinker {
            linker,
            frequencies,
            surfaces,
        }
    }

    pub fn n_entities(&self) -> usize {
        self.frequencies.len()
    }

    pub fn linker(&self) -> &Linker {
        &self.linker
    }

    pub fn spans(&self, tokens: &[String]) -> Vec<SpanMatch> {
        self.linker.find(tokens)
    }

    pub fn link(&self, question: &str, mode: LinkMode) -> Result<SparseVector> {
        if question.trim().is_empty() {
            return Err(Error::Contract("empty question".into()));
        }
        let tokens = tokenize(question);
        match mode {
            LinkMode::LeastFrequentExact => {
                let best = self
                    .linker
                    .find(&tokens)
                    .into_iter()
                    .map(|m| m.entity_id)
                    .min_by_key(|&e| (self.frequencies[e as usize], e))
                    .ok_or_else(|| Error::Linking(question.to_string()))?;
                SparseVector::one_hot(self.n_entities(), best)
            }
            LinkMode::TfidfTopk { n } => {
                let ranked = self.surfaces.top_matches(&tokens, n.max(1));
                let total: f64 = ranked.iter().map(|&(_, s)| s).sum();
                if ranked.is_empty() || total <= 0.0 {
                    return Err(Error::Linking(question.to_string()));
                }
                let pairs = ranked.into_iter().map(|(e, s)| (e, s / total)).collect();
                SparseVector::from_pairs(self.n_entities(), pairs)
            }
        }
    }

    /// Exact linking with a fallback to `tfidf_topk(fallback_n)` when no
    /// surface form matches.
    pub fn link_with_fallback(&self, question: &str, fallback_n: usize) -> Result<SparseVector> {
        match self.link(question, LinkMode::LeastFrequentExact) {
            Err(Error::Linking(_)) => self.link(question, LinkMode::TfidfTopk { n: fallback_n }),
            other => other,
        }
    }
}
