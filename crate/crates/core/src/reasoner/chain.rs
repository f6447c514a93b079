use std::collections::BTreeSet;

use super::follow::{follow, follow_backward, FollowConfig, FollowTrace, ReasonerContext, Retrieval};
use crate::corpus::{EntityId, MentionId};
use crate::encoders::{Gradients, ParamId};
use crate::error::{Error, Result};
use crate::sparse::{softmax_vjp, sparse_softmax, SparseVector};

/// Loss is clipped at `-ln(MASS_FLOOR)` when no answer has mass.
pub const MASS_FLOOR: f64 = 1e-12;

/// Runs `hops` follow steps from `z0`; hop `t` conditions on `Z_{t-1}`.
/// `supports`, when given, fixes the retrieved mentions of every hop.
pub fn multi_hop(
    ctx: &ReasonerContext<'_>,
    phi_q: &SparseVector,
    z0: &SparseVector,
    hops: usize,
    config: &FollowConfig,
    supports: Option<&[Vec<MentionId>]>,
) -> Result<Vec<FollowTrace>> {
    if hops == 0 {
        return Err(Error::Contract("need at least one hop".into()));
    }
    if let Some(s) = supports {
        if s.len() != hops {
            return Err(Error::Contract("one fixed support per hop required".into()));
        }
    }
    let mut traces: Vec<FollowTrace> = Vec::with_capacity(hops);
    for t in 1..=hops {
        let retrieval = match supports {
            Some(s) => Retrieval::Fixed(&s[t - 1]),
            None => Retrieval::TopK,
        };
        let z_prev = traces.last().map_or(z0, |tr| &tr.z);
        let (_, trace) = follow(ctx, z_prev, phi_q, t, config, retrieval)?;
        traces.push(trace);
    }
    Ok(traces)
}

/// Backpropagates `∂loss/∂Z_T` through every hop of a [`multi_hop`] chain.
pub fn multi_hop_backward(
    ctx: &ReasonerContext<'_>,
    traces: &[FollowTrace],
    upstream: &SparseVector,
    grads: &mut Gradients,
) -> Result<SparseVector> {
    let mut d = upstream.clone();
    for trace in traces.iter().rev() {
        d = follow_backward(ctx, trace, &d, grads)?;
    }
    Ok(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// `∂loss/∂Z` on `Z`'s support.
    pub grad: SparseVector,
    /// No answer had positive mass; the loss is clipped and `grad` is zero.
    pub zero_mass: bool,
}

/// `−ln Σ_{a ∈ answers} Z[a]`.
pub fn loss_and_grad(z: &SparseVector, answers: &BTreeSet<EntityId>) -> LossOutput {
    let mass: f64 = z
        .iter()
        .filter(|(e, _)| answers.contains(e))
        .map(|(_, w)| w)
        .sum();
    let zeros = vec![0.0; z.nnz()];
    if mass <= 0.0 {
        log::debug!("no answer mass in a support of {} entities", z.nnz());
        return LossOutput {
            loss: -MASS_FLOOR.ln(),
            grad: SparseVector::from_parts_unchecked(z.dim(), z.indices().to_vec(), zeros),
            zero_mass: true,
        };
    }
    let grad = z
        .indices()
        .iter()
        .map(|e| if answers.contains(e) { -1.0 / mass } else { 0.0 })
        .collect();
    LossOutput {
        loss: -mass.ln(),
        grad: SparseVector::from_parts_unchecked(z.dim(), z.indices().to_vec(), grad),
        zero_mass: false,
    }
}

/// Forward intermediates of [`hop_mixture`].
#[derive(Debug, Clone)]
pub struct MixtureTrace {
    /// Hop weights `π₀, π₁, π₂`.
    pub pi: [f64; 3],
    pub z0_rescored: SparseVector,
    /// `Rᵀ φ_q`, the rescoring direction for `Z₀`.
    rescore_query: Vec<f64>,
    phi_q: SparseVector,
    z1: SparseVector,
    z2: SparseVector,
    pub z_star: SparseVector,
}

fn axpy_sparse(parts: &[(f64, &SparseVector)]) -> Result<SparseVector> {
    let dim = parts[0].1.dim();
    let mut pairs = Vec::new();
    for (w, v) in parts {
        pairs.extend(v.iter().map(|(i, x)| (i, w * x)));
    }
    SparseVector::from_pairs(dim, pairs)
}

/// `Z* = π₀ Z₀' + π₁ Z₁ + π₂ Z₂` with `π = softmax(Uᵀ φ_q)` and
/// `Z₀'[e] ∝ Z₀[e] · exp(E[e] · Rᵀ φ_q)` on `Z₀`'s support.
pub fn hop_mixture(
    ctx: &ReasonerContext<'_>,
    phi_q: &SparseVector,
    z0: &SparseVector,
    z1: &SparseVector,
    z2: &SparseVector,
) -> Result<MixtureTrace> {
    let n = ctx.n_entities();
    if z0.dim() != n || z1.dim() != n || z2.dim() != n {
        return Err(Error::Contract("mixture inputs must share the entity dim".into()));
    }
    if z0.is_empty() {
        return Err(Error::Contract("Z0 must be non-empty".into()));
    }
    let hop_logits = ctx.params.tensor(ParamId::MixerHops).project(phi_q);
    let pi_vec = sparse_softmax(&SparseVector::new(3, vec![0, 1, 2], hop_logits)?, 1.0)?;
    let pi = [pi_vec.get(0), pi_vec.get(1), pi_vec.get(2)];

    let rescore_query = ctx.params.tensor(ParamId::MixerRescore).project(phi_q);
    let logits: Vec<f64> = z0
        .iter()
        .map(|(e, w)| {
            let r: f64 = ctx
                .embeddings
                .row(e)
                .iter()
                .zip(&rescore_query)
                .map(|(a, b)| a * b)
                .sum();
            w.ln() + r
        })
        .collect();
    let z0_rescored = sparse_softmax(&SparseVector::new(n, z0.indices().to_vec(), logits)?, 1.0)?;
    let z_star = axpy_sparse(&[(pi[0], &z0_rescored), (pi[1], z1), (pi[2], z2)])?;
    Ok(MixtureTrace {
        pi,
        z0_rescored,
        rescore_query,
        phi_q: phi_q.clone(),
        z1: z1.clone(),
        z2: z2.clone(),
        z_star,
    })
}

/// Backward of [`hop_mixture`]: accumulates mixer and word-table gradients
/// and returns `(∂/∂Z₁, ∂/∂Z₂)` on their supports.
pub fn hop_mixture_backward(
    ctx: &ReasonerContext<'_>,
    trace: &MixtureTrace,
    upstream: &SparseVector,
    grads: &mut Gradients,
) -> (SparseVector, SparseVector) {
    let restrict = |v: &SparseVector, scale: f64| {
        let vals = v.indices().iter().map(|&e| scale * upstream.get(e)).collect();
        SparseVector::from_parts_unchecked(v.dim(), v.indices().to_vec(), vals)
    };
    let dot = |v: &SparseVector| v.iter().map(|(e, x)| x * upstream.get(e)).sum::<f64>();
    let dpi = [dot(&trace.z0_rescored), dot(&trace.z1), dot(&trace.z2)];
    let pi = SparseVector::from_parts_unchecked(3, vec![0, 1, 2], trace.pi.to_vec());
    let dlogits = softmax_vjp(&pi, 1.0, &SparseVector::from_parts_unchecked(3, vec![0, 1, 2], dpi.to_vec()));
    grads.add_outer(ParamId::MixerHops, &trace.phi_q, dlogits.values());

    let d0 = restrict(&trace.z0_rescored, trace.pi[0]);
    let dr = softmax_vjp(&trace.z0_rescored, 1.0, &d0);
    let p = trace.rescore_query.len();
    let mut drq = vec![0.0; p];
    for (e, d) in dr.iter() {
        if d == 0.0 {
            continue;
        }
        for (acc, x) in drq.iter_mut().zip(ctx.embeddings.row(e)) {
            *acc += d * x;
        }
        ctx.embeddings.row_backward(grads, e, d, &trace.rescore_query);
    }
    grads.add_outer(ParamId::MixerRescore, &trace.phi_q, &drq);
    (restrict(&trace.z1, trace.pi[1]), restrict(&trace.z2, trace.pi[2]))
}

/// Adds two gradients given on possibly different supports.
pub fn add_sparse(a: &SparseVector, b: &SparseVector) -> SparseVector {
    let mut pairs: Vec<(u32, f64)> = a.iter().collect();
    pairs.extend(b.iter());
    SparseVector::from_pairs(a.dim(), pairs).expect("same dimension")
}
