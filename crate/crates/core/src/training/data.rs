use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DocId, EntityId, KnowledgeBase, RelationId};
use crate::error::{Error, Result};
use crate::text::{hash_parts, tokenize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleLabel {
    Positive,
    SharedEntityNeg,
    SharedRelationNeg,
    RandomNeg,
}

impl ExampleLabel {
    pub const NEGATIVES: [ExampleLabel; 3] = [
        ExampleLabel::SharedEntityNeg,
        ExampleLabel::SharedRelationNeg,
        ExampleLabel::RandomNeg,
    ];
}

/// A slot-filling query `"e₁, R, ?"` paired with one passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotFillingExample {
    pub query: String,
    pub subject: EntityId,
    pub relation: RelationId,
    pub passage: DocId,
    /// Inclusive token spans of correct tails; empty for negatives.
    pub answer_spans: Vec<(u32, u32)>,
    pub label: ExampleLabel,
    /// For negatives, the index of the positive they were drawn for.
    pub positive: Option<usize>,
}

pub fn slot_filling_query(kb: &KnowledgeBase, corpus: &Corpus, subject: EntityId, relation: RelationId) -> String {
    format!(
        "{}, {}, ?",
        corpus.entity(subject).surface_form,
        kb.description(relation)
    )
}

/// One positive per KB triple whose subject and object are co-mentioned in
/// a passage. When passages carry a title entity only the subject's own
/// article qualifies. Answer spans cover every correct tail of
/// `(subject, relation)` mentioned in the passage.
pub fn generate_pretraining_data(kb: &KnowledgeBase, corpus: &Corpus) -> Vec<SlotFillingExample> {
    let titled = corpus.documents().iter().any(|d| d.title_entity.is_some());
    let mut out = Vec::new();
    for t in kb.triples() {
        let subject_docs: BTreeSet<DocId> = corpus
            .mentions_of_entity(t.subject)
            .iter()
            .map(|&m| corpus.mention(m).doc_id)
            .collect();
        let passage = corpus
            .mentions_of_entity(t.object)
            .iter()
            .map(|&m| corpus.mention(m).doc_id)
            .filter(|d| subject_docs.contains(d))
            .filter(|&d| !titled || corpus.doc(d).title_entity == Some(t.subject))
            .min();
        let Some(passage) = passage else { continue };
        let tails = kb.objects(t.subject, t.relation);
        let answer_spans = corpus
            .mentions_in_doc(passage)
            .iter()
            .filter(|m| tails.contains(&m.entity_id))
            .map(|m| (m.start, m.end))
            .collect();
        out.push(SlotFillingExample {
            query: slot_filling_query(kb, corpus, t.subject, t.relation),
            subject: t.subject,
            relation: t.relation,
            passage,
            answer_spans,
            label: ExampleLabel::Positive,
            positive: None,
        });
    }
    out
}

/// Whether `passage` contains a surface form or alias of any correct tail
/// of `(subject, relation)`, by token-sequence containment.
pub fn passage_has_answer(
    kb: &KnowledgeBase,
    corpus: &Corpus,
    subject: EntityId,
    relation: RelationId,
    passage: DocId,
) -> bool {
    let tokens = &corpus.doc(passage).tokens;
    kb.objects(subject, relation).iter().any(|&o| {
        let e = corpus.entity(o);
        std::iter::once(&e.surface_form)
            .chain(&e.aliases)
            .map(|f| tokenize(f))
            .filter(|f| !f.is_empty())
            .any(|f| tokens.windows(f.len()).any(|w| w == f.as_slice()))
    })
}

/// Checks the example's label against its passage: positives need at least
/// one in-bounds answer span over a correct tail, negatives must not
/// mention any correct tail in any form.
pub fn verify_example(kb: &KnowledgeBase, corpus: &Corpus, ex: &SlotFillingExample) -> bool {
    let doc = corpus.doc(ex.passage);
    match ex.label {
        ExampleLabel::Positive => {
            let tails = kb.objects(ex.subject, ex.relation);
            !ex.answer_spans.is_empty()
                && ex.answer_spans.iter().all(|&(s, e)| {
                    (e as usize) < doc.tokens.len()
                        && s <= e
                        && corpus.mentions_in_doc(ex.passage).iter().any(|m| {
                            m.start == s && m.end == e && tails.contains(&m.entity_id)
                        })
                })
        }
        _ => {
            ex.answer_spans.is_empty()
                && !passage_has_answer(kb, corpus, ex.subject, ex.relation, ex.passage)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativeConfig {
    pub per_positive: usize,
    /// Target fractions of shared-entity, shared-relation and random
    /// negatives.
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Random draws tried before a type is declared unavailable.
    pub max_tries: usize,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig {
            per_positive: 3,
            ratios: [0.4, 0.4, 0.2],
            seed: 5,
            max_tries: 20,
        }
    }
}

impl NegativeConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.iter().sum();
        if self.ratios.iter().any(|&r| r < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config("negative ratios must be >= 0 and sum to 1".into()));
        }
        Ok(())
    }
}

/// Negatives plus how many requested ones could not be produced.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub examples: Vec<SlotFillingExample>,
    pub shortfall: usize,
}

impl NegativeSet {
    pub fn count(&self, label: ExampleLabel) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }
}

/// Draws `per_positive` negatives for every positive. Types follow the
/// largest-deficit schedule against `ratios` over the whole stream, skipping
/// types with no valid candidate for the current positive. Every emitted
/// negative passes [`verify_example`].
pub fn make_negatives(
    positives: &[SlotFillingExample],
    kb: &KnowledgeBase,
    corpus: &Corpus,
    config: &NegativeConfig,
) -> Result<NegativeSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut by_relation: Vec<Vec<usize>> = Vec::new();
    for (i, p) in positives.iter().enumerate() {
        let r = p.relation as usize;
        if by_relation.len() <= r {
            by_relation.resize(r + 1, Vec::new());
        }
        by_relation[r].push(i);
    }
    let mut counts = [0usize; 3];
    let mut total = 0usize;
    let mut examples = Vec::new();
    let mut shortfall = 0;
    for (pi, pos) in positives.iter().enumerate() {
        let mut used: BTreeSet<DocId> = BTreeSet::from([pos.passage]);
        let mut unavailable = [false; 3];
        for _ in 0..config.per_positive {
            let mut drawn = None;
            while drawn.is_none() {
                let Some(kind) = (0..3)
                    .filter(|&k| !unavailable[k] && config.ratios[k] > 0.0)
                    .max_by(|&a, &b| {
                        let da = config.ratios[a] * (total + 1) as f64 - counts[a] as f64;
                        let db = config.ratios[b] * (total + 1) as f64 - counts[b] as f64;
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                else {
                    break;
                };
                let candidate = match ExampleLabel::NEGATIVES[kind] {
                    ExampleLabel::SharedEntityNeg => {
                        let docs: Vec<DocId> = corpus
                            .mentions_of_entity(pos.subject)
                            .iter()
                            .map(|&m| corpus.mention(m).doc_id)
                            .collect::<BTreeSet<_>>()
                            .into_iter()
                            .filter(|d| !used.contains(d))
                            .filter(|&d| !passage_has_answer(kb, corpus, pos.subject, pos.relation, d))
                            .collect();
                        docs.choose(&mut rng).copied()
                    }
                    ExampleLabel::SharedRelationNeg => {
                        let pool = &by_relation[pos.relation as usize];
                        (0..config.max_tries).find_map(|_| {
                            let other = &positives[*pool.choose(&mut rng)?];
                            (other.subject != pos.subject
                                && !used.contains(&other.passage)
                                && !passage_has_answer(kb, corpus, pos.subject, pos.relation, other.passage))
                            .then_some(other.passage)
                        })
                    }
                    _ => (0..config.max_tries).find_map(|_| {
                        let d = rng.gen_range(0..corpus.n_docs()) as DocId;
                        (!used.contains(&d)
                            && !passage_has_answer(kb, corpus, pos.subject, pos.relation, d))
                        .then_some(d)
                    }),
                };
                match candidate {
                    Some(d) => drawn = Some((kind, d)),
                    None => unavailable[kind] = true,
                }
            }
            let Some((kind, passage)) = drawn else {
                shortfall += 1;
                continue;
            };
            used.insert(passage);
            counts[kind] += 1;
            total += 1;
            examples.push(SlotFillingExample {
                query: pos.query.clone(),
                subject: pos.subject,
                relation: pos.relation,
                passage,
                answer_spans: Vec::new(),
                label: ExampleLabel::NEGATIVES[kind],
                positive: Some(pi),
            });
        }
    }
    if shortfall > 0 {
        log::warn!("{shortfall} requested negatives had no valid candidate");
    }
    Ok(NegativeSet {
        examples,
        shortfall,
    })
}

/// Deterministic membership of a held-out split, by seeded hash of `key`.
pub fn in_split(key: &str, fraction: f64, seed: u64) -> bool {
    let h = hash_parts(seed, "split", &[key]);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}
