use serde::{Deserialize, Serialize};

use crate::corpus::Linker;
use crate::error::{Error, Result};
use crate::sparse::SparseVector;
use crate::text::{bucket, hash_parts, tokenize_segments, DEFAULT_HASH_SEED};

/// Token that replaces linked entity spans in questions, so that entity
/// identity reaches the query only through the entity embeddings.
pub const ENTITY_PLACEHOLDER: &str = "[ent]";

const SENTENCE_END: [&str; 3] = [".", "!", "?"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Embedding size; the start and end blocks get `p / 2` each.
    pub p: usize,
    /// Hashed feature space for mention and question features.
    pub feature_buckets: usize,
    /// Hashed vocabulary of the word table behind entity embeddings.
    pub word_buckets: usize,
    pub context_window: usize,
    /// Number of per-hop query heads.
    pub n_hops: usize,
    /// Expected number of active features per input, used as the fan-in of
    /// the uniform initializer.
    pub feature_fan_in: usize,
    pub seed: u64,
    pub hash_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            p: 400,
            feature_buckets: 1 << 14,
            word_buckets: 1 << 14,
            context_window: 8,
            n_hops: 3,
            feature_fan_in: 32,
            seed: 11,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.p % 2 != 0 {
            return Err(Error::Config(format!("p must be even and >= 2, got {}", self.p)));
        }
        for (name, n) in [
            ("feature_buckets", self.feature_buckets),
            ("word_buckets", self.word_buckets),
        ] {
            if !n.is_power_of_two() || n < 2 {
                return Err(Error::Config(format!("{name} must be a power of two >= 2")));
            }
        }
        if self.n_hops < 3 {
            return Err(Error::Config("n_hops must be at least 3".into()));
        }
        if self.feature_fan_in == 0 {
            return Err(Error::Config("feature_fan_in must be >= 1".into()));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.p / 2
    }

    fn feature(&self, namespace: &str, parts: &[&str]) -> (u32, f64) {
        (
            bucket(hash_parts(self.hash_seed, namespace, parts), self.feature_buckets),
            1.0,
        )
    }

    pub fn word_bucket(&self, token: &str) -> u32 {
        bucket(hash_parts(self.hash_seed, "word", &[token]), self.word_buckets)
    }
}

/// Hashed, L2-normalized feature blocks `φ_start` and `φ_end` of a mention,
/// plus the bag of context words over the word vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct MentionFeatures {
    pub start: SparseVector,
    pub end: SparseVector,
    pub context: SparseVector,
}

fn normalized(dim: usize, pairs: Vec<(u32, f64)>) -> SparseVector {
    let v = SparseVector::from_pairs(dim, pairs).expect("hashed features are in range");
    let norm = v.l2_norm();
    if norm > 0.0 {
        v.scaled(1.0 / norm)
    } else {
        v
    }
}

/// Features of the span `start..=end` in `tokens`.
///
/// The start block holds the first span token, the span bag, the left
/// context window as unigrams and bigrams, and the two nearest left tokens
/// tagged by offset. The end block mirrors it on the right. The context
/// bag counts the word buckets of both windows, with tokens of the
/// mention's own sentence counted twice.
pub fn mention_features(
    config: &EncoderConfig,
    tokens: &[String],
    start: usize,
    end: usize,
) -> MentionFeatures {
    let span = &tokens[start..=end];
    let left = &tokens[start.saturating_sub(config.context_window)..start];
    let right_end = (end + 1 + config.context_window).min(tokens.len());
    let right = &tokens[end + 1..right_end];

    let mut s = vec![config.feature("first", &[&span[0]])];
    let mut e = vec![config.feature("last", &[&span[span.len() - 1]])];
    for t in span {
        s.push(config.feature("sspan", &[t]));
        e.push(config.feature("espan", &[t]));
    }
    for t in left {
        s.push(config.feature("lu", &[t]));
    }
    for w in left.windows(2) {
        s.push(config.feature("lb", &[&w[0], &w[1]]));
    }
    for (offset, t) in left.iter().rev().take(2).enumerate() {
        s.push(config.feature("lpos", &[&offset.to_string(), t]));
    }
    for t in right {
        e.push(config.feature("ru", &[t]));
    }
    for w in right.windows(2) {
        e.push(config.feature("rb", &[&w[0], &w[1]]));
    }
    for (offset, t) in right.iter().take(2).enumerate() {
        e.push(config.feature("rpos", &[&offset.to_string(), t]));
    }
    let is_boundary = |t: &&String| SENTENCE_END.contains(&t.as_str());
    let same_sentence = left
        .iter()
        .rev()
        .take_while(|t| !is_boundary(t))
        .chain(right.iter().take_while(|t| !is_boundary(t)));
    let context = left
        .iter()
        .chain(right)
        .chain(same_sentence)
        .map(|t| (config.word_bucket(t), 1.0))
        .collect();
    MentionFeatures {
        start: normalized(config.feature_buckets, s),
        end: normalized(config.feature_buckets, e),
        context: SparseVector::from_pairs(config.word_buckets, context)
            .expect("word buckets are in range"),
    }
}

/// Question tokens with linked entity spans collapsed to
/// [`ENTITY_PLACEHOLDER`], each tagged with its comma-separated segment.
pub fn masked_question_tokens(question: &str, linker: Option<&Linker>) -> Vec<(usize, String)> {
    let mut flat: Vec<(usize, String)> = tokenize_segments(question)
        .into_iter()
        .enumerate()
        .flat_map(|(seg, toks)| toks.into_iter().map(move |t| (seg, t)))
        .collect();
    if let Some(linker) = linker {
        let tokens: Vec<String> = flat.iter().map(|(_, t)| t.clone()).collect();
        for m in linker.find(&tokens).into_iter().rev() {
            let (start, end) = (m.start as usize, m.end as usize);
            let seg = flat[start].0;
            flat.splice(start..=end, [(seg, ENTITY_PLACEHOLDER.to_string())]);
        }
    }
    flat
}

/// `φ_q`: unigrams, bigrams and segment-tagged unigrams of the masked
/// question, L2-normalized.
pub fn query_features(config: &EncoderConfig, question: &str, linker: Option<&Linker>) -> SparseVector {
    let toks = masked_question_tokens(question, linker);
    let mut f = Vec::new();
    for (seg, t) in &toks {
        f.push(config.feature("qu", &[t]));
        f.push(config.feature("qs", &[&seg.to_string(), t]));
    }
    for w in toks.windows(2) {
        f.push(config.feature("qb", &[&w[0].1, &w[1].1]));
    }
    normalized(config.feature_buckets, f)
}
