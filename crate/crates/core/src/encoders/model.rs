use super::features::{mention_features, MentionFeatures};
use super::params::{EncoderParams, Gradients, ParamId};
use crate::corpus::{Corpus, Entity, Mention};
use crate::error::{Error, Result};
use crate::sparse::SparseVector;
use crate::text::tokenize;

impl EncoderParams {
    pub fn features_of(&self, corpus: &Corpus, mention: &Mention) -> MentionFeatures {
        mention_features(
            self.config(),
            &corpus.doc(mention.doc_id).tokens,
            mention.start as usize,
            mention.end as usize,
        )
    }

    /// `f(m) = [W_startᵀ φ_start; W_endᵀ φ_end] + Cᵀ φ_context`.
    pub fn encode_features(&self, features: &MentionFeatures) -> Vec<f64> {
        let mut out = self.tensor(ParamId::MentionStart).project(&features.start);
        out.extend(self.tensor(ParamId::MentionEnd).project(&features.end));
        let ctx = self.tensor(ParamId::MentionContext).project(&features.context);
        for (o, c) in out.iter_mut().zip(ctx) {
            *o += c;
        }
        out
    }

    pub fn encode_mention(&self, corpus: &Corpus, mention: &Mention) -> Vec<f64> {
        self.encode_features(&self.features_of(corpus, mention))
    }

    /// `g̃_t(q) = V_tᵀ φ_q`.
    pub fn encode_query(&self, phi_q: &SparseVector, hop: usize) -> Result<Vec<f64>> {
        self.check_hop(hop)?;
        Ok(self.tensor(ParamId::Query(hop)).project(phi_q))
    }

    pub(crate) fn check_hop(&self, hop: usize) -> Result<()> {
        if hop == 0 || hop > self.config().n_hops {
            return Err(Error::Contract(format!(
                "hop {hop} outside 1..={}",
                self.config().n_hops
            )));
        }
        Ok(())
    }

    /// Accumulates the gradient of `f(m)` given upstream `df`.
    pub fn mention_backward(&self, grads: &mut Gradients, features: &MentionFeatures, df: &[f64]) {
        let h = self.config().half();
        grads.add_outer(ParamId::MentionStart, &features.start, &df[..h]);
        grads.add_outer(ParamId::MentionEnd, &features.end, &df[h..]);
        grads.add_outer(ParamId::MentionContext, &features.context, df);
    }

    /// Accumulates the gradient of `g̃_t(q)` given upstream `dg`.
    pub fn query_backward(&self, grads: &mut Gradients, phi_q: &SparseVector, hop: usize, dg: &[f64]) {
        grads.add_outer(ParamId::Query(hop), phi_q, dg);
    }
}

/// `E`: each entity's vector is the mean of the word-table rows of its
/// surface-form tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbeddings {
    p: usize,
    tokens: Vec<Vec<u32>>,
    data: Vec<f64>,
}

impl EntityEmbeddings {
    pub fn new(params: &EncoderParams, entities: &[Entity]) -> Self {
        let config = params.config();
        let tokens = entities
            .iter()
            .map(|e| {
                tokenize(&e.surface_form)
                    .iter()
                    .map(|t| config.word_bucket(t))
                    .collect()
            })
            .collect();
        let mut emb = EntityEmbeddings {
            p: config.p,
            tokens,
            data: Vec::new(),
        };
        emb.refresh(params);
        emb
    }

    /// Recomputes every row from the current word table.
    pub fn refresh(&mut self, params: &EncoderParams) {
        let word = params.tensor(ParamId::Word);
        self.data = vec![0.0; self.tokens.len() * self.p];
        for (e, toks) in self.tokens.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let inv = 1.0 / toks.len() as f64;
            let dst = &mut self.data[e * self.p..(e + 1) * self.p];
            for &t in toks {
                for (d, w) in dst.iter_mut().zip(word.row(t as usize)) {
                    *d += inv * w;
                }
            }
        }
    }

    pub fn n_entities(&self) -> usize {
        self.tokens.len()
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn row(&self, e: u32) -> &[f64] {
        &self.data[e as usize * self.p..(e as usize + 1) * self.p]
    }

    /// `Zᵀ E`.
    pub fn weighted_sum(&self, z: &SparseVector) -> Result<Vec<f64>> {
        if z.dim() != self.n_entities() {
            return Err(Error::Contract(format!(
                "distribution over {} entities, embeddings for {}",
                z.dim(),
                self.n_entities()
            )));
        }
        let mut out = vec![0.0; self.p];
        for (e, w) in z.iter() {
            for (o, x) in out.iter_mut().zip(self.row(e)) {
                *o += w * x;
            }
        }
        Ok(out)
    }

    /// `g_t = g̃_t + Z_prevᵀ E`.
    pub fn condition_query(&self, g_tilde: &[f64], z_prev: &SparseVector) -> Result<Vec<f64>> {
        if g_tilde.len() != self.p {
            return Err(Error::Contract("query and embedding dims differ".into()));
        }
        let mut g = self.weighted_sum(z_prev)?;
        for (o, x) in g.iter_mut().zip(g_tilde) {
            *o += x;
        }
        Ok(g)
    }

    /// Accumulates `dE[e] = scale · upstream` into the word table.
    pub fn row_backward(&self, grads: &mut Gradients, e: u32, scale: f64, upstream: &[f64]) {
        let toks = &self.tokens[e as usize];
        if toks.is_empty() {
            return;
        }
        let inv = scale / toks.len() as f64;
        for &t in toks {
            grads.add_row(ParamId::Word, t, inv, upstream);
        }
    }

    /// Backward of [`condition_query`](Self::condition_query) for upstream
    /// `dg`: word-table gradients are accumulated and `∂/∂Z_prev[e] = E[e]·dg`
    /// is returned on `z_prev`'s support.
    pub fn condition_backward(
        &self,
        grads: &mut Gradients,
        z_prev: &SparseVector,
        dg: &[f64],
    ) -> SparseVector {
        let mut dz = Vec::with_capacity(z_prev.nnz());
        for (e, w) in z_prev.iter() {
            self.row_backward(grads, e, w, dg);
            dz.push(self.row(e).iter().zip(dg).map(|(a, b)| a * b).sum());
        }
        SparseVector::from_parts_unchecked(z_prev.dim(), z_prev.indices().to_vec(), dz)
    }
}
