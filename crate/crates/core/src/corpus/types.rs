use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = u32;
pub type MentionId = u32;
pub type DocId = u32;
pub type RelationId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: DocId,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title_entity: Option<EntityId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub entity_id: EntityId,
    pub surface_form: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// A linked span: tokens `start..=end` of document `doc_id` refer to `entity_id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub mention_id: MentionId,
    pub entity_id: EntityId,
    pub doc_id: DocId,
    pub start: u32,
    pub end: u32,
}

/// Documents, entity lexicon and mentions with dense ids.
///
/// Mentions are ordered by `(doc_id, start)` and `mention_id` is their
/// position in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    entities: Vec<Entity>,
    mentions: Vec<Mention>,
    doc_mentions: Vec<Range<usize>>,
    entity_mentions: Vec<Vec<MentionId>>,
}

impl Corpus {
    /// Validates ids and spans and assigns mention ids. `mentions` may be in any
    /// order; their `mention_id` fields are overwritten.
    pub fn new(
        mut documents: Vec<Document>,
        mut entities: Vec<Entity>,
        mut mentions: Vec<Mention>,
    ) -> Result<Self> {
        documents.sort_by_key(|d| d.doc_id);
        for (i, d) in documents.iter().enumerate() {
            if d.doc_id as usize != i {
                return Err(Error::Validation(format!(
                    "doc ids must be unique and contiguous from 0; found {} at position {i}",
                    d.doc_id
                )));
            }
            if d.tokens.is_empty() {
                return Err(Error::Validation(format!("doc {} has no tokens", d.doc_id)));
            }
        }
        entities.sort_by_key(|e| e.entity_id);
        for (i, e) in entities.iter().enumerate() {
            if e.entity_id as usize != i {
                return Err(Error::Validation(format!(
                    "entity ids must be unique and contiguous from 0; found {} at position {i}",
                    e.entity_id
                )));
            }
            if e.surface_form.trim().is_empty() {
                return Err(Error::Validation(format!(
                    "entity {} has an empty surface form",
                    e.entity_id
                )));
            }
        }
        for m in &mentions {
            let doc = documents.get(m.doc_id as usize).ok_or_else(|| {
                Error::Validation(format!("mention refers to unknown doc {}", m.doc_id))
            })?;
            if m.start > m.end || m.end as usize >= doc.tokens.len() {
                return Err(Error::Validation(format!(
                    "mention span {}..={} out of bounds for doc {} of length {}",
                    m.start,
                    m.end,
                    m.doc_id,
                    doc.tokens.len()
                )));
            }
            if m.entity_id as usize >= entities.len() {
                return Err(Error::Validation(format!(
                    "mention refers to unknown entity {}",
                    m.entity_id
                )));
            }
        }
        mentions.sort_by_key(|m| (m.doc_id, m.start, m.end, m.entity_id));
        for w in mentions.windows(2) {
            if (w[0].doc_id, w[0].start, w[0].end) == (w[1].doc_id, w[1].start, w[1].end) {
                return Err(Error::Validation(format!(
                    "duplicate mention span {}..={} in doc {}",
                    w[0].start, w[0].end, w[0].doc_id
                )));
            }
        }
        for (i, m) in mentions.iter_mut().enumerate() {
            m.mention_id = i as MentionId;
        }

        let mut doc_mentions = vec![0..0; documents.len()];
        let mut lo = 0;
        for (d, slot) in doc_mentions.iter_mut().enumerate() {
            let mut hi = lo;
            while hi < mentions.len() && mentions[hi].doc_id as usize == d {
                hi += 1;
            }
            *slot = lo..hi;
            lo = hi;
        }
        let mut entity_mentions = vec![Vec::new(); entities.len()];
        for m in &mentions {
            entity_mentions[m.entity_id as usize].push(m.mention_id);
        }
        Ok(Corpus {
            documents,
            entities,
            mentions,
            doc_mentions,
            entity_mentions,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn mentions(&self) -> &[Mention] {
        &self.mentions
    }

    pub fn n_docs(&self) -> usize {
        self.documents.len()
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn n_mentions(&self) -> usize {
        self.mentions.len()
    }

    pub fn doc(&self, id: DocId) -> &Document {
        &self.documents[id as usize]
    }

    pub fn entity(&self, id: EntityId) -> &Entity {
        &self.entities[id as usize]
    }

    pub fn mention(&self, id: MentionId) -> &Mention {
        &self.mentions[id as usize]
    }

    pub fn mentions_in_doc(&self, id: DocId) -> &[Mention] {
        &self.mentions[self.doc_mentions[id as usize].clone()]
    }

    pub fn mentions_of_entity(&self, id: EntityId) -> &[MentionId] {
        &self.entity_mentions[id as usize]
    }

    /// Number of corpus mentions per entity.
    pub fn entity_frequencies(&self) -> Vec<u32> {
        self.entity_mentions.iter().map(|v| v.len() as u32).collect()
    }

    pub fn span_tokens(&self, m: &Mention) -> &[String] {
        &self.doc(m.doc_id).tokens[m.start as usize..=m.end as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

/// Facts `(subject, relation, object)` plus a description per relation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnowledgeBase {
    triples: Vec<Triple>,
    relation_descriptions: BTreeMap<RelationId, String>,
    by_subject_relation: HashMap<(EntityId, RelationId), Vec<EntityId>>,
}

impl KnowledgeBase {
    /// Sorts and validates triples. Duplicates and unknown entities are errors.
    pub fn new(
        mut triples: Vec<Triple>,
        relation_descriptions: BTreeMap<RelationId, String>,
        n_entities: usize,
    ) -> Result<Self> {
        triples.sort();
        for w in triples.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Validation(format!("duplicate triple {:?}", w[0])));
            }
        }
        let mut by_subject_relation: HashMap<(EntityId, RelationId), Vec<EntityId>> =
            HashMap::new();
        for t in &triples {
            if t.subject as usize >= n_entities || t.object as usize >= n_entities {
                return Err(Error::Validation(format!(
                    "triple {t:?} refers to an unknown entity"
                )));
            }
            if !relation_descriptions.contains_key(&t.relation) {
                return Err(Error::Validation(format!(
                    "relation {} has no description",
                    t.relation
                )));
            }
            by_subject_relation
                .entry((t.subject, t.relation))
                .or_default()
                .push(t.object);
        }
        Ok(KnowledgeBase {
            triples,
            relation_descriptions,
            by_subject_relation,
        })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn relation_descriptions(&self) -> &BTreeMap<RelationId, String> {
        &self.relation_descriptions
    }

    pub fn description(&self, r: RelationId) -> &str {
        &self.relation_descriptions[&r]
    }

    /// Objects `o` with `(subject, relation, o)` in the KB, ascending.
    pub fn objects(&self, subject: EntityId, relation: RelationId) -> &[EntityId] {
        self.by_subject_relation
            .get(&(subject, relation))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Follows a relation path from a set of seed entities.
    pub fn traverse(&self, seeds: &[EntityId], path: &[RelationId]) -> BTreeSet<EntityId> {
        let mut frontier: BTreeSet<EntityId> = seeds.iter().copied().collect();
        for &r in path {
            frontier = frontier
                .iter()
                .flat_map(|&e| self.objects(e, r).iter().copied())
                .collect();
        }
        frontier
    }

    pub fn in_degrees(&self, n_entities: usize) -> Vec<u32> {
        let mut deg = vec![0u32; n_entities];
        for t in &self.triples {
            deg[t.object as usize] += 1;
        }
        deg
    }
}

/// A question with its answer set. `gold_chain` holds intermediate entity
/// sets for analysis and is never used by the training loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHopQuestion {
    pub text: String,
    pub hops: usize,
    pub seed_entities: Vec<EntityId>,
    pub answers: Vec<EntityId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_chain: Option<Vec<Vec<EntityId>>>,
}

impl MultiHopQuestion {
    pub fn validate(&self) -> Result<()> {
        if self.hops == 0 {
            return Err(Error::Validation(format!(
                "question {:?} has zero hops",
                self.text
            )));
        }
        if self.answers.is_empty() {
            return Err(Error::Validation(format!(
                "question {:?} has no answers",
                self.text
            )));
        }
        Ok(())
    }
}
