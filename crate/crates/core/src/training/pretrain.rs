use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{ExampleLabel, NegativeConfig, SlotFillingExample};
use crate::corpus::{Corpus, DocId, EntityId, Linker};
use crate::dense_index::{build_index, DenseMentionIndex, IndexConfig};
use crate::encoders::{
    mention_features, query_features, EncoderParams, EntityEmbeddings, Gradients,
    MentionFeatures, ParamId, Sgd, SgdConfig,
};
use crate::error::{Error, Result};
use crate::sparse::SparseVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub negatives: NegativeConfig,
    /// Score every span up to `max_span_len` tokens instead of only the
    /// entity-linked mentions.
    pub full_span_candidates: bool,
    pub max_span_len: usize,
    /// Fraction of triples held out from pretraining for evaluation.
    pub heldout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            sgd: SgdConfig::default(),
            epochs: 4,
            batch_size: 16,
            seed: 3,
            negatives: NegativeConfig::default(),
            full_span_candidates: false,
            max_span_len: 4,
            heldout_fraction: 0.1,
        }
    }
}

/// A positive with the passages of its negatives; all their candidate
/// spans share the softmax normalizers.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainGroup {
    pub positive: SlotFillingExample,
    pub negative_passages: Vec<DocId>,
}

pub fn group_examples(
    positives: &[SlotFillingExample],
    negatives: &[SlotFillingExample],
) -> Vec<PretrainGroup> {
    let mut groups: Vec<PretrainGroup> = positives
        .iter()
        .map(|p| PretrainGroup {
            positive: p.clone(),
            negative_passages: Vec::new(),
        })
        .collect();
    for n in negatives {
        if let Some(i) = n.positive {
            groups[i].negative_passages.push(n.passage);
        }
    }
    groups
}

/// Candidate spans drawn from a list of passages.
#[derive(Debug, Clone)]
pub struct SpanCandidates {
    pub spans: Vec<(DocId, u32, u32)>,
    pub features: Vec<MentionFeatures>,
}

impl SpanCandidates {
    /// Which candidates are answer spans of `positive`.
    pub fn answer_mask(&self, positive: &SlotFillingExample) -> Vec<bool> {
        self.spans
            .iter()
            .map(|&(d, s, e)| d == positive.passage && positive.answer_spans.contains(&(s, e)))
            .collect()
    }
}

/// Mention features for the whole corpus, indexed by mention id.
pub fn corpus_features(params: &EncoderParams, corpus: &Corpus) -> Vec<MentionFeatures> {
    corpus
        .mentions()
        .iter()
        .map(|m| params.features_of(corpus, m))
        .collect()
}

/// Entity-linked mentions of `docs` (features from `cache`), or every span
/// up to `max_span_len` tokens with `full_span_candidates`.
pub fn candidates(
    params: &EncoderParams,
    corpus: &Corpus,
    docs: &[DocId],
    cache: &[MentionFeatures],
    config: &PretrainConfig,
) -> SpanCandidates {
    let mut out = SpanCandidates {
        spans: Vec::new(),
        features: Vec::new(),
    };
    for &d in docs {
        if config.full_span_candidates {
            let tokens = &corpus.doc(d).tokens;
            for s in 0..tokens.len() {
                for e in s..(s + config.max_span_len).min(tokens.len()) {
                    out.spans.push((d, s as u32, e as u32));
                    out.features.push(mention_features(params.config(), tokens, s, e));
                }
            }
        } else {
            for m in corpus.mentions_in_doc(d) {
                out.spans.push((d, m.start, m.end));
                out.features.push(cache[m.mention_id as usize].clone());
            }
        }
    }
    out
}

/// One slot-filling query scored against a shared candidate set.
#[derive(Debug, Clone)]
pub struct SpanQuery {
    pub phi_q: SparseVector,
    pub subject: EntityId,
    pub is_answer: Vec<bool>,
}

/// Candidates from every passage of the batch (positives first, then
/// negatives, each passage once) and one query per group.
fn batch_candidates(
    params: &EncoderParams,
    corpus: &Corpus,
    groups: &[PretrainGroup],
    phis: &[SparseVector],
    batch: &[usize],
    cache: &[MentionFeatures],
    config: &PretrainConfig,
) -> (SpanCandidates, Vec<SpanQuery>) {
    let mut docs: Vec<DocId> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let passages = batch
        .iter()
        .map(|&i| groups[i].positive.passage)
        .chain(batch.iter().flat_map(|&i| groups[i].negative_passages.iter().copied()));
    for d in passages {
        if seen.insert(d) {
            docs.push(d);
        }
    }
    let cands = candidates(params, corpus, &docs, cache, config);
    let queries = batch
        .iter()
        .map(|&i| SpanQuery {
            phi_q: phis[i].clone(),
            subject: groups[i].positive.subject,
            is_answer: cands.answer_mask(&groups[i].positive),
        })
        .collect();
    (cands, queries)
}

/// Slot-filling query vector `g̃₁(q) + E[e₁]`.
pub fn slot_query(
    params: &EncoderParams,
    embeddings: &EntityEmbeddings,
    phi_q: &SparseVector,
    subject: EntityId,
) -> Result<Vec<f64>> {
    let g_tilde = params.encode_query(phi_q, 1)?;
    let mut g = g_tilde;
    for (x, e) in g.iter_mut().zip(embeddings.row(subject)) {
        *x += e;
    }
    Ok(g)
}

fn log_softmax_mass(scores: &[f64], is_answer: &[bool]) -> (f64, Vec<f64>) {
    let c = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - c).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|x| x / total).collect();
    let mass: f64 = probs
        .iter()
        .zip(is_answer)
        .filter(|(_, &a)| a)
        .map(|(p, _)| p)
        .sum();
    let grad = probs
        .iter()
        .zip(is_answer)
        .map(|(&p, &a)| p - if a { p / mass } else { 0.0 })
        .collect();
    (-mass.ln(), grad)
}

/// Summed span loss `−ln Σ_{answers} P_start − ln Σ_{answers} P_end` over
/// `queries`, with start scores `f_start(s)·g_start` and end scores
/// `f_end(s)·g_end` normalized separately over all candidates. Queries
/// without an answer among the candidates are skipped. Returns the loss sum
/// and the number of queries used; gradients are accumulated when `grads`
/// is given.
pub fn span_loss(
    params: &EncoderParams,
    embeddings: &EntityEmbeddings,
    queries: &[SpanQuery],
    cands: &SpanCandidates,
    mut grads: Option<&mut Gradients>,
) -> Result<(f64, usize)> {
    let h = params.config().half();
    let encoded: Vec<Vec<f64>> = cands
        .features
        .iter()
        .map(|f| params.encode_features(f))
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut df = vec![vec![0.0; 2 * h]; encoded.len()];
    let (mut total, mut used) = (0.0, 0usize);
    for q in queries {
        if q.is_answer.len() != encoded.len() {
            return Err(Error::Contract("answer mask does not match the candidates".into()));
        }
        if !q.is_answer.iter().any(|&a| a) {
            continue;
        }
        let g = slot_query(params, embeddings, &q.phi_q, q.subject)?;
        let start: Vec<f64> = encoded.iter().map(|f| dot(&f[..h], &g[..h])).collect();
        let end: Vec<f64> = encoded.iter().map(|f| dot(&f[h..], &g[h..])).collect();
        let (ls, ds) = log_softmax_mass(&start, &q.is_answer);
        let (le, de) = log_softmax_mass(&end, &q.is_answer);
        total += ls + le;
        used += 1;
        if let Some(grads) = grads.as_deref_mut() {
            let mut dg = vec![0.0; 2 * h];
            for (i, f) in encoded.iter().enumerate() {
                for c in 0..h {
                    df[i][c] += ds[i] * g[c];
                    df[i][h + c] += de[i] * g[h + c];
                    dg[c] += ds[i] * f[c];
                    dg[h + c] += de[i] * f[h + c];
                }
            }
            params.query_backward(grads, &q.phi_q, 1, &dg);
            embeddings.row_backward(grads, q.subject, 1.0, &dg);
        }
    }
    if let Some(grads) = grads {
        for (features, d) in cands.features.iter().zip(&df) {
            params.mention_backward(grads, features, d);
        }
    }
    Ok((total, used))
}

pub const PRETRAIN_PARAMS: [ParamId; 5] = [
    ParamId::MentionStart,
    ParamId::MentionEnd,
    ParamId::MentionContext,
    ParamId::Query(1),
    ParamId::Word,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean span loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub skipped_groups: usize,
}

/// Trains the mention encoder, query head 1 and the word table on span
/// selection. Afterwards heads `2..=n_hops` start as copies of head 1 and
/// all parameters are rounded to checkpoint precision.
pub fn pretrain_mention_encoder(
    params: &mut EncoderParams,
    corpus: &Corpus,
    groups: &[PretrainGroup],
    linker: Option<&Linker>,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    if groups.is_empty() {
        return Err(Error::Contract("no pretraining examples".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if groups.iter().any(|g| g.positive.label != ExampleLabel::Positive) {
        return Err(Error::Contract("groups must be built around positives".into()));
    }
    let cache = corpus_features(params, corpus);
    let phis: Vec<SparseVector> = groups
        .iter()
        .map(|g| query_features(params.config(), &g.positive.query, linker))
        .collect();
    let mut embeddings = EntityEmbeddings::new(params, corpus.entities());
    let mut sgd = Sgd::new(config.sgd.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        skipped_groups: 0,
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let (cands, queries) = batch_candidates(params, corpus, groups, &phis, batch, &cache, config);
            let mut grads = Gradients::new(params);
            let (loss, used) = span_loss(params, &embeddings, &queries, &cands, Some(&mut grads))?;
            if epoch == 0 {
                report.skipped_groups += batch.len() - used;
            }
            if used == 0 {
                log::warn!("pretraining batch without positives skipped");
                continue;
            }
            total += loss;
            n += used;
            grads.scale(1.0 / used as f64);
            sgd.step(params, &grads, &PRETRAIN_PARAMS);
            embeddings.refresh(params);
        }
        let mean = if n > 0 { total / n as f64 } else { 0.0 };
        log::info!("pretrain epoch {} loss {mean:.4}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    for t in 2..=params.config().n_hops {
        params.copy_query_head(1, t);
    }
    params.round_to_f32();
    Ok(report)
}

/// Encodes every mention with the (now frozen) encoder and indexes the
/// vectors, recording the encoder fingerprint in the index.
pub fn freeze_and_index(
    params: &EncoderParams,
    corpus: &Corpus,
    config: &IndexConfig,
) -> Result<DenseMentionIndex> {
    let vectors: Vec<Vec<f64>> = corpus
        .mentions()
        .iter()
        .map(|m| params.encode_mention(corpus, m))
        .collect();
    build_index(&vectors, config, params.mention_fingerprint())
}

/// Top-1 accuracy of slot-filling queries: over the whole index, and among
/// the mentions of the positive passage only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotFillingAccuracy {
    pub index_top1: f64,
    pub passage_top1: f64,
    pub n: usize,
}

pub fn slot_filling_accuracy(
    params: &EncoderParams,
    corpus: &Corpus,
    index: &DenseMentionIndex,
    positives: &[SlotFillingExample],
    linker: Option<&Linker>,
) -> Result<SlotFillingAccuracy> {
    let embeddings = EntityEmbeddings::new(params, corpus.entities());
    let (mut hit_index, mut hit_passage) = (0usize, 0usize);
    for ex in positives {
        let phi_q = query_features(params.config(), &ex.query, linker);
        let g = slot_query(params, &embeddings, &phi_q, ex.subject)?;
        let is_gold = |m: u32| {
            let mention = corpus.mention(m);
            mention.doc_id == ex.passage && ex.answer_spans.contains(&(mention.start, mention.end))
        };
        let top = index.mips_topk(&g, 1)?;
        if top.iter().next().is_some_and(|(m, _)| is_gold(m)) {
            hit_index += 1;
        }
        let best = corpus
            .mentions_in_doc(ex.passage)
            .iter()
            .map(|m| (m.mention_id, index.score(m.mention_id as usize, &g)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if best.is_some_and(|(m, _)| is_gold(m)) {
            hit_passage += 1;
        }
    }
    let n = positives.len().max(1) as f64;
    Ok(SlotFillingAccuracy {
        index_top1: hit_index as f64 / n,
        passage_top1: hit_passage as f64 / n,
        n: positives.len(),
    })
}
