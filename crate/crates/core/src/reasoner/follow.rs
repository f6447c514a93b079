use serde::{Deserialize, Serialize};

use crate::corpus::{EntityId, MentionId};
use crate::dense_index::DenseMentionIndex;
use crate::encoders::{EncoderParams, EntityEmbeddings, Gradients};
use crate::error::{Error, Result};
use crate::sparse::{
    softmax_vjp, sparse_softmax, spvec_ragged_matmul, spvec_ragged_matmul_binary, RaggedMatrix,
    SparseVector,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Entity score is its best surviving mention.
    Max,
    /// Entity score sums over its surviving mentions.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FollowConfig {
    pub k: usize,
    pub lambda: f64,
    pub aggregation: Aggregation,
    /// When off, the TFIDF expansion is ignored and every retrieved mention
    /// survives.
    pub tfidf_filter: bool,
    /// Use 1 instead of the stored TFIDF score for entries of `A`.
    pub binarize_a: bool,
}

impl Default for FollowConfig {
    fn default() -> Self {
        FollowConfig {
            k: 100,
            lambda: 4.0,
            aggregation: Aggregation::Max,
            tfidf_filter: true,
            binarize_a: false,
        }
    }
}

impl FollowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be >= 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Read-only state shared by every follow step.
#[derive(Clone, Copy)]
pub struct ReasonerContext<'a> {
    pub index: &'a DenseMentionIndex,
    /// `A_{E→M}`.
    pub a: &'a RaggedMatrix,
    /// `B_{M→E}`.
    pub b: &'a RaggedMatrix,
    pub params: &'a EncoderParams,
    pub embeddings: &'a EntityEmbeddings,
}

impl ReasonerContext<'_> {
    pub fn n_entities(&self) -> usize {
        self.a.n_rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n_e, n_m) = (self.a.n_rows(), self.a.n_cols());
        if self.b.n_rows() != n_m || self.b.n_cols() != n_e {
            return Err(Error::Contract(format!(
                "A is {n_e}x{n_m} but B is {}x{}",
                self.b.n_rows(),
                self.b.n_cols()
            )));
        }
        if self.index.len() != n_m {
            return Err(Error::Contract(format!(
                "index holds {} mentions, A has {n_m}",
                self.index.len()
            )));
        }
        if self.embeddings.n_entities() != n_e {
            return Err(Error::Contract("entity embeddings do not match A".into()));
        }
        let p = self.params.config().p;
        if self.index.dim() != p || self.embeddings.dim() != p {
            return Err(Error::Contract("index, embeddings and encoder dims differ".into()));
        }
        Ok(())
    }
}

/// How the relevance step selects mentions.
#[derive(Debug, Clone, Copy)]
pub enum Retrieval<'s> {
    /// Top-K inner product search against the index.
    TopK,
    /// Score exactly these mentions (sorted, unique); used to hold the
    /// retrieval support fixed while checking gradients.
    Fixed(&'s [MentionId]),
}

/// One `(entity, mention)` pair that survived filtering.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Survivor {
    entity: EntityId,
    mention: MentionId,
    /// `Z_prevᵀ A` at this mention (1 with the filter off).
    expansion: f64,
    /// `f(m) · g_t`.
    score: f64,
    /// `ln(expansion · B[m, e]) + score`.
    logit: f64,
}

/// Forward intermediates of one follow step.
#[derive(Debug, Clone)]
pub struct FollowTrace {
    pub hop: usize,
    params_version: u64,
    pub z_prev: SparseVector,
    phi_q: SparseVector,
    /// Conditioned query `g_t`.
    pub g: Vec<f64>,
    /// Relevance support with raw scores.
    pub retrieved: SparseVector,
    pub expanded_nnz: usize,
    survivors: Vec<Survivor>,
    /// `survivors[group[i]..group[i + 1]]` belong to `z.indices()[i]`.
    groups: Vec<usize>,
    /// Pre-temperature entity logits, aligned with `z`.
    pub entity_logits: SparseVector,
    pub z: SparseVector,
    config: FollowConfig,
}

impl FollowTrace {
    pub fn retrieved_ids(&self) -> &[MentionId] {
        self.retrieved.indices()
    }

    /// For each entity of `Z_t`, the surviving mention with the largest
    /// logit (ties to the lowest mention id).
    pub fn argmax_mentions(&self) -> Vec<(EntityId, MentionId)> {
        self.groups
            .windows(2)
            .map(|w| {
                let group = &self.survivors[w[0]..w[1]];
                let mut best = &group[0];
                for s in group {
                    if s.logit > best.logit {
                        best = s;
                    }
                }
                (best.entity, best.mention)
            })
            .collect()
    }

    /// Mentions that survived filtering.
    pub fn surviving_mentions(&self) -> Vec<MentionId> {
        let mut ids: Vec<MentionId> = self.survivors.iter().map(|s| s.mention).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let c = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    c + xs.map(|x| (x - c).exp()).sum::<f64>().ln()
}

/// One textual follow step from `Z_{t-1}` to `Z_t`:
///
/// ```text
/// g_t        = V_tᵀ φ_q + Z_{t-1}ᵀ E
/// expansion  = Z_{t-1}ᵀ A
/// relevance  = exp(f(m) · g_t) on the top-K mentions
/// logit(e)   = agg_{m ∈ M_e} ln(expansion_m · relevance_m · B[m, e])
/// Z_t        = softmax(logit / λ)
/// ```
///
/// With `Sum` aggregation the logit is a log-sum-exp, so `λ = 1` yields the
/// normalized mention mixture `Σ_m expansion_m · relevance_m`. With the
/// TFIDF filter off the expansion factor is dropped.
pub fn follow(
    ctx: &ReasonerContext<'_>,
    z_prev: &SparseVector,
    phi_q: &SparseVector,
    hop: usize,
    config: &FollowConfig,
    retrieval: Retrieval<'_>,
) -> Result<(SparseVector, FollowTrace)> {
    config.validate()?;
    ctx.validate()?;
    if z_prev.dim() != ctx.n_entities() {
        return Err(Error::Contract(format!(
            "Z_prev has dim {}, expected {}",
            z_prev.dim(),
            ctx.n_entities()
        )));
    }
    let g_tilde = ctx.params.encode_query(phi_q, hop)?;
    let g = ctx.embeddings.condition_query(&g_tilde, z_prev)?;

    let retrieved = match retrieval {
        Retrieval::TopK => ctx.index.mips_topk(&g, config.k)?,
        Retrieval::Fixed(ids) => {
            if ids.windows(2).any(|w| w[0] >= w[1])
                || ids.last().is_some_and(|&m| m as usize >= ctx.index.len())
            {
                return Err(Error::Contract(
                    "fixed retrieval support must be sorted, unique and in range".into(),
                ));
            }
            let scores = ids.iter().map(|&m| ctx.index.score(m as usize, &g)).collect();
            SparseVector::new(ctx.index.len(), ids.to_vec(), scores)?
        }
    };

    let expansion = if config.tfidf_filter {
        Some(if config.binarize_a {
            spvec_ragged_matmul_binary(z_prev, ctx.a)?
        } else {
            spvec_ragged_matmul(z_prev, ctx.a)?
        })
    } else {
        None
    };

    let mut survivors = Vec::new();
    let mut push = |m: MentionId, x: f64, s: f64| {
        let (ents, coref) = ctx.b.row(m as usize);
        for (&e, &b) in ents.iter().zip(coref) {
            if b > 0.0 {
                survivors.push(Survivor {
                    entity: e,
                    mention: m,
                    expansion: x,
                    score: s,
                    logit: (x * b).ln() + s,
                });
            }
        }
    };
    match &expansion {
        Some(ex) => {
            // merge-intersect over the two sorted supports
            let (ri, rv) = (retrieved.indices(), retrieved.values());
            let (ei, ev) = (ex.indices(), ex.values());
            let (mut i, mut j) = (0, 0);
            while i < ri.len() && j < ei.len() {
                match ri[i].cmp(&ei[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        if ev[j] > 0.0 {
                            push(ri[i], ev[j], rv[i]);
                        }
                        i += 1;
                        j += 1;
                    }
                }
            }
        }
        None => {
            for (m, s) in retrieved.iter() {
                push(m, 1.0, s);
            }
        }
    }
    if survivors.is_empty() {
        return Err(Error::EmptyResult {
            hop,
            retrieved: retrieved.nnz(),
            expanded: expansion.as_ref().map_or(0, SparseVector::nnz),
        });
    }
    survivors.sort_by_key(|s| (s.entity, s.mention));

    let mut groups = vec![0];
    let mut entities = Vec::new();
    let mut logits = Vec::new();
    let mut start = 0;
    while start < survivors.len() {
        let e = survivors[start].entity;
        let end = start + survivors[start..].iter().take_while(|s| s.entity == e).count();
        let group = survivors[start..end].iter().map(|s| s.logit);
        logits.push(match config.aggregation {
            Aggregation::Max => group.fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Sum => logsumexp(group),
        });
        entities.push(e);
        groups.push(end);
        start = end;
    }
    let entity_logits = SparseVector::new(ctx.n_entities(), entities, logits)?;
    let z = sparse_softmax(&entity_logits, config.lambda)?;
    let trace = FollowTrace {
        hop,
        params_version: ctx.params.version(),
        z_prev: z_prev.clone(),
        phi_q: phi_q.clone(),
        g,
        expanded_nnz: expansion.as_ref().map_or(0, SparseVector::nnz),
        retrieved,
        survivors,
        groups,
        entity_logits,
        z: z.clone(),
        config: config.clone(),
    };
    Ok((z, trace))
}

/// Backward of [`follow`] given `∂loss/∂Z_t` (any support; entries off
/// `Z_t`'s support are ignored). Accumulates query-head and word-table
/// gradients and returns `∂loss/∂Z_{t-1}` on `Z_{t-1}`'s support.
///
/// Top-K selection, `A` and `B` are constants. Max aggregation routes each
/// entity's gradient to its best mention, ties to the lowest mention id.
pub fn follow_backward(
    ctx: &ReasonerContext<'_>,
    trace: &FollowTrace,
    upstream: &SparseVector,
    grads: &mut Gradients,
) -> Result<SparseVector> {
    if ctx.params.version() != trace.params_version {
        return Err(Error::Contract(
            "stale trace: parameters changed since the forward pass".into(),
        ));
    }
    let z = &trace.z;
    let u_values: Vec<f64> = z.indices().iter().map(|&e| upstream.get(e)).collect();
    let u = SparseVector::from_parts_unchecked(z.dim(), z.indices().to_vec(), u_values);
    let dlogit = softmax_vjp(z, trace.config.lambda, &u);

    // d logit / d survivor logit
    let mut dsurv = vec![0.0; trace.survivors.len()];
    for (i, &dl) in dlogit.values().iter().enumerate() {
        let (lo, hi) = (trace.groups[i], trace.groups[i + 1]);
        let group = &trace.survivors[lo..hi];
        match trace.config.aggregation {
            Aggregation::Max => {
                let mut best = 0;
                for (j, s) in group.iter().enumerate() {
                    if s.logit > group[best].logit {
                        best = j;
                    }
                }
                dsurv[lo + best] = dl;
            }
            Aggregation::Sum => {
                let total = trace.entity_logits.values()[i];
                for (j, s) in group.iter().enumerate() {
                    dsurv[lo + j] = dl * (s.logit - total).exp();
                }
            }
        }
    }

    let p = ctx.params.config().p;
    let mut dg = vec![0.0; p];
    let mut dexp: Vec<(MentionId, f64)> = Vec::with_capacity(trace.survivors.len());
    for (s, &d) in trace.survivors.iter().zip(&dsurv) {
        if d == 0.0 {
            continue;
        }
        for (acc, &f) in dg.iter_mut().zip(ctx.index.row(s.mention as usize)) {
            *acc += d * f64::from(f);
        }
        if trace.config.tfidf_filter {
            dexp.push((s.mention, d / s.expansion));
        }
    }
    dexp.sort_by_key(|&(m, _)| m);
    dexp.dedup_by(|later, earlier| {
        if later.0 == earlier.0 {
            earlier.1 += later.1;
            true
        } else {
            false
        }
    });

    ctx.params.query_backward(grads, &trace.phi_q, trace.hop, &dg);
    let mut dz = ctx.embeddings.condition_backward(grads, &trace.z_prev, &dg);
    if !dexp.is_empty() {
        let binarize = trace.config.binarize_a;
        for (k, &e) in trace.z_prev.indices().iter().enumerate() {
            let (cols, vals) = ctx.a.row(e as usize);
            let (mut i, mut j) = (0, 0);
            let mut acc = 0.0;
            while i < cols.len() && j < dexp.len() {
                match cols[i].cmp(&dexp[j].0) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        acc += if binarize { 1.0 } else { vals[i] } * dexp[j].1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            dz.values_mut()[k] += acc;
        }
    }
    Ok(dz)
}
