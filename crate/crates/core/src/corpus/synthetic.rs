//! Seeded generator for a typed KB, templated subject articles and
//! multi-hop questions built from relation paths.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::types::*;
use crate::error::{Error, Result};

/// `(question description, passage phrase)` per relation.
const RELATIONS: &[(&str, &str)] = &[
    ("employer", "works for"),
    ("birth place", "was born in"),
    ("founded by", "was founded by"),
    ("member of", "is a member of"),
    ("located in", "is located in"),
    ("spouse", "is married to"),
    ("record label", "records for"),
    ("educated at", "studied at"),
    ("headquarters", "is headquartered in"),
    ("award received", "received"),
    ("director", "was directed by"),
    ("author", "was written by"),
    ("genre", "belongs to the genre"),
    ("language", "is written in"),
    ("country", "is part of"),
    ("parent company", "is owned by"),
    ("manufacturer", "is made by"),
    ("capital", "has its capital at"),
    ("team", "plays for"),
    ("instrument", "plays the"),
];

const TYPE_WORDS: &[&str] = &["person", "organization", "place", "work", "award", "concept"];

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    /// Entities `0..n_docs` get an article and outgoing facts.
    pub n_docs: usize,
    /// Hop counts to generate questions for, each in 1..=3.
    pub hops: Vec<usize>,
    pub questions_per_hop: usize,
    pub seed: u64,
    pub in_degree_cap: u32,
    pub n_types: usize,
    pub alias_fraction: f64,
    /// Probability that a subject has facts for a relation in its domain.
    pub relation_coverage: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_entities: 2000,
            n_relations: 10,
            n_docs: 2000,
            hops: vec![1, 2, 3],
            questions_per_hop: 1000,
            seed: 17,
            in_degree_cap: 100,
            n_types: 4,
            alias_fraction: 0.1,
            relation_coverage: 0.8,
        }
    }
}

/// Generator output. `questions[i]` holds the questions for `config.hops[i]`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub corpus: Corpus,
    pub kb: KnowledgeBase,
    pub questions: Vec<Vec<MultiHopQuestion>>,
}

impl SyntheticDataset {
    pub fn questions_for(&self, config: &SyntheticConfig, hops: usize) -> &[MultiHopQuestion] {
        config
            .hops
            .iter()
            .position(|&h| h == hops)
            .map(|i| self.questions[i].as_slice())
            .unwrap_or(&[])
    }
}

fn relation_text(r: usize) -> (String, String) {
    match RELATIONS.get(r) {
        Some(&(desc, phrase)) => (desc.to_string(), phrase.to_string()),
        None => (format!("relation {r}"), format!("is tied by link {r} to")),
    }
}

fn relation_types(r: usize, n_types: usize) -> (usize, usize) {
    let domain = r % n_types;
    let offset = 1 + (r / n_types) % (n_types - 1);
    (domain, (domain + offset) % n_types)
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn pseudo_words(rng: &mut ChaCha8Rng, count: usize, reserved: &HashSet<String>) -> Vec<String> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = if rng.gen_bool(0.7) { 3 } else { 4 };
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if !reserved.contains(&w) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Builds a random typed KB, one templated article per subject entity and
/// questions `"head, rel₁, …, rel_T, ?"` whose answers are the KB traversal.
pub fn generate_synthetic_dataset(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    if config.n_entities < 10 {
        return Err(Error::Config("n_entities must be at least 10".into()));
    }
    if config.n_docs == 0 || config.n_docs > config.n_entities {
        return Err(Error::Config("n_docs must be in 1..=n_entities".into()));
    }
    if config.n_relations == 0 {
        return Err(Error::Config("n_relations must be at least 1".into()));
    }
    if !(2..=TYPE_WORDS.len()).contains(&config.n_types) {
        return Err(Error::Config(format!(
            "n_types must be in 2..={}",
            TYPE_WORDS.len()
        )));
    }
    if config.hops.iter().any(|h| !(1..=3).contains(h)) {
        return Err(Error::Config("hops must be in 1..=3".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_types = config.n_types;
    let entity_type = |e: usize| e % n_types;

    let relations: Vec<(String, String)> = (0..config.n_relations).map(relation_text).collect();
    let mut reserved: HashSet<String> = TYPE_WORDS.iter().map(|s| s.to_string()).collect();
    for (d, p) in &relations {
        reserved.extend(crate::text::tokenize(d));
        reserved.extend(crate::text::tokenize(p));
    }
    reserved.insert("is".into());
    reserved.insert("a".into());

    // Names: two unique pseudo-words per entity; some entities also answer
    // to their second word alone.
    let words = pseudo_words(&mut rng, 2 * config.n_entities, &reserved);
    let mut entities = Vec::with_capacity(config.n_entities);
    for e in 0..config.n_entities {
        let (first, second) = (&words[2 * e], &words[2 * e + 1]);
        let aliases = if rng.gen_bool(config.alias_fraction) {
            vec![capitalize(second)]
        } else {
            Vec::new()
        };
        entities.push(Entity {
            entity_id: e as EntityId,
            surface_form: format!("{} {}", capitalize(first), capitalize(second)),
            aliases,
        });
    }

    // Facts: every subject has, per relation in its domain, 1-3 objects of
    // the relation's range type, drawn with a popularity skew.
    let mut by_type: Vec<Vec<usize>> = vec![Vec::new(); n_types];
    for e in 0..config.n_entities {
        by_type[entity_type(e)].push(e);
    }
    let popularity: Vec<Vec<f64>> = by_type
        .iter()
        .map(|members| {
            let mut w: Vec<f64> = (0..members.len())
                .map(|rank| 1.0 / ((rank + 1) as f64).sqrt())
                .collect();
            let total: f64 = w.iter().sum();
            let mut acc = 0.0;
            for x in w.iter_mut() {
                acc += *x / total;
                *x = acc;
            }
            w
        })
        .collect();
    let mut triples = BTreeSet::new();
    for s in 0..config.n_docs {
        for (r, _) in relations.iter().enumerate() {
            let (domain, range) = relation_types(r, n_types);
            if domain != entity_type(s) || !rng.gen_bool(config.relation_coverage) {
                continue;
            }
            let k = match rng.gen_range(0.0..1.0) {
                x if x < 0.7 => 1,
                x if x < 0.92 => 2,
                _ => 3,
            };
            for _ in 0..k {
                let u: f64 = rng.gen_range(0.0..1.0);
                let cdf = &popularity[range];
                let pos = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
                let o = by_type[range][pos];
                if o != s {
                    triples.insert(Triple {
                        subject: s as EntityId,
                        relation: r as RelationId,
                        object: o as EntityId,
                    });
                }
            }
        }
    }
    let descriptions: BTreeMap<RelationId, String> = relations
        .iter()
        .enumerate()
        .map(|(r, (d, _))| (r as RelationId, d.clone()))
        .collect();
    let kb = KnowledgeBase::new(triples.into_iter().collect(), descriptions, config.n_entities)?;

    // Articles with gold mention positions.
    let name_tokens: Vec<Vec<String>> = entities
        .iter()
        .map(|e| crate::text::tokenize(&e.surface_form))
        .collect();
    let mut documents = Vec::with_capacity(config.n_docs);
    let mut mentions = Vec::new();
    let mut facts_by_subject: Vec<Vec<Triple>> = vec![Vec::new(); config.n_docs];
    for t in kb.triples() {
        facts_by_subject[t.subject as usize].push(*t);
    }
    for (s, facts) in facts_by_subject.iter_mut().enumerate() {
        facts.shuffle(&mut rng);
        let mut tokens: Vec<String> = Vec::new();
        let mut push_entity = |tokens: &mut Vec<String>, e: usize, toks: &[String]| {
            let start = tokens.len() as u32;
            tokens.extend(toks.iter().cloned());
            mentions.push(Mention {
                mention_id: 0,
                entity_id: e as EntityId,
                doc_id: s as DocId,
                start,
                end: tokens.len() as u32 - 1,
            });
        };
        push_entity(&mut tokens, s, &name_tokens[s]);
        tokens.extend(["is", "a", TYPE_WORDS[entity_type(s)], "."].map(String::from));
        for t in facts.iter() {
            push_entity(&mut tokens, s, &name_tokens[s]);
            tokens.extend(crate::text::tokenize(&relations[t.relation as usize].1));
            let o = t.object as usize;
            let alias = entities[o].aliases.first().filter(|_| rng.gen_bool(0.3));
            match alias {
                Some(a) => push_entity(&mut tokens, o, &crate::text::tokenize(a)),
                None => push_entity(&mut tokens, o, &name_tokens[o]),
            }
            tokens.push(".".into());
        }
        documents.push(Document {
            doc_id: s as DocId,
            tokens,
            title_entity: Some(s as EntityId),
        });
    }
    let corpus = Corpus::new(documents, entities, mentions)?;

    let in_degree = kb.in_degrees(config.n_entities);
    let mut questions = Vec::with_capacity(config.hops.len());
    for &hops in &config.hops {
        questions.push(sample_questions(
            &mut rng,
            &kb,
            &corpus,
            &in_degree,
            hops,
            config,
        )?);
    }
    Ok(SyntheticDataset {
        corpus,
        kb,
        questions,
    })
}

fn sample_questions(
    rng: &mut ChaCha8Rng,
    kb: &KnowledgeBase,
    corpus: &Corpus,
    in_degree: &[u32],
    hops: usize,
    config: &SyntheticConfig,
) -> Result<Vec<MultiHopQuestion>> {
    let n_relations = config.n_relations as RelationId;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let max_attempts = 50 * config.questions_per_hop.max(1) + 1000;
    for _ in 0..max_attempts {
        if out.len() == config.questions_per_hop {
            break;
        }
        let head = rng.gen_range(0..config.n_docs) as EntityId;
        let mut frontier: BTreeSet<EntityId> = BTreeSet::from([head]);
        let mut path = Vec::with_capacity(hops);
        let mut chain = Vec::new();
        let mut ok = true;
        for step in 0..hops {
            let options: Vec<RelationId> = (0..n_relations)
                .filter(|&r| frontier.iter().any(|&e| !kb.objects(e, r).is_empty()))
                .collect();
            let Some(&r) = options.choose(rng) else {
                ok = false;
                break;
            };
            path.push(r);
            frontier = kb.traverse(&frontier.iter().copied().collect::<Vec<_>>(), &[r]);
            if step + 1 < hops {
                if frontier
                    .iter()
                    .any(|&e| in_degree[e as usize] > config.in_degree_cap)
                {
                    ok = false;
                    break;
                }
                chain.push(frontier.iter().copied().collect::<Vec<_>>());
            }
        }
        if !ok || frontier.is_empty() {
            continue;
        }
        let mut text = corpus.entity(head).surface_form.clone();
        for &r in &path {
            text.push_str(", ");
            text.push_str(kb.description(r));
        }
        text.push_str(", ?");
        if !seen.insert(text.clone()) {
            continue;
        }
        out.push(MultiHopQuestion {
            text,
            hops,
            seed_entities: vec![head],
            answers: frontier.into_iter().collect(),
            gold_chain: Some(chain),
        });
    }
    if out.is_empty() {
        return Err(Error::Generation(format!(
            "no valid {hops}-hop relation path found"
        )));
    }
    if out.len() < config.questions_per_hop {
        log::warn!(
            "only {} distinct {hops}-hop questions available (asked for {})",
            out.len(),
            config.questions_per_hop
        );
    }
    Ok(out)
}

/// Relation path encoded in a generated question, recovered from its text.
pub fn parse_relation_path(kb: &KnowledgeBase, text: &str) -> Option<Vec<RelationId>> {
    let by_desc: BTreeMap<&str, RelationId> = kb
        .relation_descriptions()
        .iter()
        .map(|(&r, d)| (d.as_str(), r))
        .collect();
    let segments: Vec<&str> = text.split(',').map(str::trim).collect();
    if segments.len() < 3 || *segments.last()? != "?" {
        return None;
    }
    segments[1..segments.len() - 1]
        .iter()
        .map(|s| by_desc.get(s).copied())
        .collect()
}
