use std::collections::BTreeSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::in_split;
use super::metrics::{evaluate_hits, rank_entities, HitsReport, DEFAULT_KS};
use crate::corpus::{EntityId, MultiHopQuestion, QuestionLinker};
use crate::dense_index::DenseMentionIndex;
use crate::encoders::{query_features, EncoderParams, EntityEmbeddings, Gradients, ParamId, Sgd, SgdConfig};
use crate::error::{Error, Result};
use crate::reasoner::{
    add_sparse, follow_backward, hop_mixture, hop_mixture_backward, loss_and_grad, multi_hop,
    multi_hop_backward, FollowConfig, FollowTrace, ReasonerContext,
};
use crate::sparse::{RaggedMatrix, SparseVector};

/// Number of TFIDF surface matches used when no exact link is found.
pub const LINK_FALLBACK_N: usize = 20;

/// A question with its features, linked `Z₀` and answer set.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuestion {
    pub text: String,
    pub hops: usize,
    pub phi_q: SparseVector,
    pub z0: SparseVector,
    pub answers: BTreeSet<EntityId>,
    pub dev: bool,
}

/// Links and featurizes questions; the dev split is a seeded hash of the
/// question text. Questions that cannot be linked are dropped and counted.
pub fn prepare_questions(
    questions: &[MultiHopQuestion],
    config: &crate::encoders::EncoderConfig,
    linker: &QuestionLinker,
    dev_fraction: f64,
    split_seed: u64,
) -> Result<(Vec<PreparedQuestion>, usize)> {
    let mut out = Vec::with_capacity(questions.len());
    let mut unlinked = 0;
    for q in questions {
        q.validate()?;
        let z0 = match linker.link_with_fallback(&q.text, LINK_FALLBACK_N) {
            Ok(z) => z,
            Err(Error::Linking(_)) => {
                unlinked += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        out.push(PreparedQuestion {
            text: q.text.clone(),
            hops: q.hops,
            phi_q: query_features(config, &q.text, Some(linker.linker())),
            z0,
            answers: q.answers.iter().copied().collect(),
            dev: in_split(&q.text, dev_fraction, split_seed),
        });
    }
    if unlinked > 0 {
        log::warn!("{unlinked} questions could not be linked and were dropped");
    }
    Ok((out, unlinked))
}

/// How the final entity distribution is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HopMode {
    /// Exactly `question.hops` follow steps.
    Known,
    /// Two follow steps combined with the learned hop mixture.
    Mixture,
}

/// The final distribution of one question and its per-hop traces.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub z: SparseVector,
    pub traces: Vec<FollowTrace>,
}

/// Runs the reasoner on one question. The empty-result error of any hop
/// is propagated, except for the optional second hop of the mixture.
pub fn predict(
    ctx: &ReasonerContext<'_>,
    q: &PreparedQuestion,
    follow: &FollowConfig,
    mode: HopMode,
) -> Result<Prediction> {
    match mode {
        HopMode::Known => {
            let traces = multi_hop(ctx, &q.phi_q, &q.z0, q.hops, follow, None)?;
            Ok(Prediction {
                z: traces.last().expect("hops >= 1").z.clone(),
                traces,
            })
        }
        HopMode::Mixture => {
            let (traces, mix) = mixture_forward(ctx, q, follow)?;
            Ok(Prediction {
                z: mix.z_star,
                traces,
            })
        }
    }
}

fn mixture_forward(
    ctx: &ReasonerContext<'_>,
    q: &PreparedQuestion,
    follow: &FollowConfig,
) -> Result<(Vec<FollowTrace>, crate::reasoner::MixtureTrace)> {
    let mut traces = multi_hop(ctx, &q.phi_q, &q.z0, 1, follow, None)?;
    match crate::reasoner::follow(ctx, &traces[0].z, &q.phi_q, 2, follow, crate::reasoner::Retrieval::TopK) {
        Ok((_, t)) => traces.push(t),
        Err(Error::EmptyResult { .. }) => {}
        Err(e) => return Err(e),
    }
    let empty = SparseVector::zeros(ctx.n_entities());
    let z2 = traces.get(1).map_or(&empty, |t| &t.z);
    let mix = hop_mixture(ctx, &q.phi_q, &q.z0, &traces[0].z, z2)?;
    Ok((traces, mix))
}

/// Loss of one question; accumulates gradients into `grads`.
pub fn question_loss(
    ctx: &ReasonerContext<'_>,
    q: &PreparedQuestion,
    follow: &FollowConfig,
    mode: HopMode,
    grads: &mut Gradients,
) -> Result<f64> {
    match mode {
        HopMode::Known => {
            let traces = multi_hop(ctx, &q.phi_q, &q.z0, q.hops, follow, None)?;
            let out = loss_and_grad(&traces.last().expect("hops >= 1").z, &q.answers);
            if !out.zero_mass {
                multi_hop_backward(ctx, &traces, &out.grad, grads)?;
            }
            Ok(out.loss)
        }
        HopMode::Mixture => {
            let (traces, mix) = mixture_forward(ctx, q, follow)?;
            let out = loss_and_grad(&mix.z_star, &q.answers);
            if out.zero_mass {
                return Ok(out.loss);
            }
            let (dz1, dz2) = hop_mixture_backward(ctx, &mix, &out.grad, grads);
            let dz1 = match traces.get(1) {
                Some(t2) => add_sparse(&dz1, &follow_backward(ctx, t2, &dz2, grads)?),
                None => dz1,
            };
            follow_backward(ctx, &traces[0], &dz1, grads)?;
            Ok(out.loss)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub sgd: SgdConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dev_fraction: f64,
    pub split_seed: u64,
    pub follow: FollowConfig,
    pub hop_mode: HopMode,
    /// Run the loop without updating anything.
    pub freeze_all: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sgd: SgdConfig::default(),
            epochs: 10,
            batch_size: 32,
            seed: 13,
            dev_fraction: 0.1,
            split_seed: 29,
            follow: FollowConfig::default(),
            hop_mode: HopMode::Known,
            freeze_all: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.follow.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config("dev_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One line of the training metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "hits@1")]
    pub hits_at_1: f64,
    #[serde(rename = "hits@5")]
    pub hits_at_5: f64,
    #[serde(rename = "hits@10")]
    pub hits_at_10: f64,
    /// Training questions skipped for an empty result.
    pub skipped: usize,
    pub wall_ms: u64,
}

/// Read-only matrices and index shared by training and evaluation.
#[derive(Clone, Copy)]
pub struct FrozenState<'a> {
    pub index: &'a DenseMentionIndex,
    pub a: &'a RaggedMatrix,
    pub b: &'a RaggedMatrix,
}

impl<'a> FrozenState<'a> {
    pub fn context(
        &self,
        params: &'a EncoderParams,
        embeddings: &'a EntityEmbeddings,
    ) -> ReasonerContext<'a> {
        ReasonerContext {
            index: self.index,
            a: self.a,
            b: self.b,
            params,
            embeddings,
        }
    }
}

fn check_not_stale(params: &EncoderParams, index: &DenseMentionIndex) -> Result<()> {
    if params.mention_fingerprint() != index.encoder_hash() {
        return Err(Error::Stale(
            "mention encoder no longer matches the frozen index".into(),
        ));
    }
    Ok(())
}

/// Trains the query side on the non-dev questions, evaluating Hits@k on
/// the dev questions after every epoch. Each record is also written as a
/// JSON line to `log` when given. The mention encoder fingerprint is
/// checked against the index before every step.
pub fn train_end_to_end(
    params: &mut EncoderParams,
    frozen: FrozenState<'_>,
    entities: &[crate::corpus::Entity],
    questions: &[PreparedQuestion],
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<MetricRecord>> {
    config.validate()?;
    check_not_stale(params, frozen.index)?;
    let train: Vec<&PreparedQuestion> = questions.iter().filter(|q| !q.dev).collect();
    let dev: Vec<PreparedQuestion> = questions.iter().filter(|q| q.dev).cloned().collect();
    if train.is_empty() {
        return Err(Error::Contract("no training questions".into()));
    }
    let trainable = if config.freeze_all {
        Vec::new()
    } else {
        ParamId::query_side(params.config().n_hops)
    };
    let mut embeddings = EntityEmbeddings::new(params, entities);
    let mut sgd = Sgd::new(config.sgd.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut total, mut counted, mut skipped) = (0.0, 0usize, 0usize);
        for batch in order.chunks(config.batch_size) {
            check_not_stale(params, frozen.index)?;
            let mut grads = Gradients::new(params);
            let mut used = 0usize;
            {
                let ctx = frozen.context(params, &embeddings);
                for &i in batch {
                    match question_loss(&ctx, train[i], &config.follow, config.hop_mode, &mut grads) {
                        Ok(l) => {
                            total += l;
                            counted += 1;
                            used += 1;
                        }
                        Err(Error::EmptyResult { .. }) => skipped += 1,
                        Err(e) => return Err(e),
                    }
                }
            }
            if used == 0 {
                log::warn!("epoch {epoch}: batch with only empty results skipped");
                continue;
            }
            if trainable.is_empty() {
                continue;
            }
            grads.scale(1.0 / used as f64);
            sgd.step(params, &grads, &trainable);
            embeddings.refresh(params);
        }
        let report = {
            let ctx = frozen.context(params, &embeddings);
            evaluate(&ctx, &dev, &config.follow, config.hop_mode)?
        };
        let record = MetricRecord {
            epoch,
            loss: if counted > 0 { total / counted as f64 } else { 0.0 },
            hits_at_1: report.hits.at(1).unwrap_or(0.0),
            hits_at_5: report.hits.at(5).unwrap_or(0.0),
            hits_at_10: report.hits.at(10).unwrap_or(0.0),
            skipped,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} dev hits@1 {:.3} skipped {skipped}",
            record.loss,
            record.hits_at_1
        );
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("<metric log>", e))?;
        }
        records.push(record);
    }
    Ok(records)
}

/// Evaluation over a question set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hits: HitsReport,
    /// Questions whose reasoning chain hit an empty result (scored as misses).
    pub empty_results: usize,
    /// Hops at which `nnz(Z_t) > K`.
    pub sparsity_violations: usize,
    pub rankings: Vec<Vec<EntityId>>,
}

/// Ranks entities for every question and scores Hits@{1,5,10}. Also
/// counts hops whose entity distribution exceeds `K` nonzeros.
pub fn evaluate(
    ctx: &ReasonerContext<'_>,
    questions: &[PreparedQuestion],
    follow: &FollowConfig,
    mode: HopMode,
) -> Result<EvalReport> {
    let mut rankings = Vec::with_capacity(questions.len());
    let mut empty_results = 0;
    let mut sparsity_violations = 0;
    for q in questions {
        match predict(ctx, q, follow, mode) {
            Ok(p) => {
                sparsity_violations += p.traces.iter().filter(|t| t.z.nnz() > follow.k).count();
                rankings.push(rank_entities(&p.z));
            }
            Err(Error::EmptyResult { .. }) => {
                empty_results += 1;
                rankings.push(Vec::new());
            }
            Err(e) => return Err(e),
        }
    }
    let gold: Vec<BTreeSet<EntityId>> = questions.iter().map(|q| q.answers.clone()).collect();
    Ok(EvalReport {
        hits: evaluate_hits(&rankings, &gold, &DEFAULT_KS)?,
        empty_results,
        sparsity_violations,
        rankings,
    })
}
