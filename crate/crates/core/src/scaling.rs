//! Follow-step latency as the entity count grows at fixed `K` and `μ`.
//!
//! Fixtures are random: every entity row of `A` holds `μ` mentions drawn
//! uniformly, every mention is coreferent with one entity, and mention
//! vectors are seeded uniform draws. Retrieval is held to `K` mentions sampled
//! from the expansion support so that only the sparse path is timed; MIPS
//! cost is a property of the index mode, not of `|E|`.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Entity, MentionId};
use crate::dense_index::{build_index, DenseMentionIndex, IndexConfig};
use crate::encoders::{EncoderConfig, EncoderParams, EntityEmbeddings};
use crate::error::{Error, Result};
use crate::reasoner::{follow, FollowConfig, ReasonerContext, Retrieval};
use crate::sparse::{spvec_ragged_matmul, RaggedBuilder, RaggedMatrix, SparseVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub sizes: Vec<usize>,
    pub k: usize,
    pub mu: usize,
    pub mentions_per_entity: usize,
    pub p: usize,
    pub queries: usize,
    /// Timed passes over the query set; the fastest is reported.
    pub rounds: usize,
    pub seed: u64,
    /// Largest allowed ratio of the last size's latency to the first's.
    pub max_growth: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            sizes: vec![10_000, 100_000, 1_000_000],
            k: 100,
            mu: 50,
            mentions_per_entity: 2,
            p: 16,
            queries: 200,
            rounds: 5,
            seed: 23,
            max_growth: 2.0,
        }
    }
}

impl ScalingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.k == 0 || self.mu == 0 || self.queries == 0 || self.rounds == 0 {
            return Err(Error::Config("scaling sizes, k, mu, queries and rounds must be non-empty".into()));
        }
        if self.mentions_per_entity == 0 {
            return Err(Error::Config("mentions_per_entity must be >= 1".into()));
        }
        if self.sizes.iter().any(|&n| n < self.k || n * self.mentions_per_entity < self.mu) {
            return Err(Error::Config("every size needs >= k entities and >= mu mentions".into()));
        }
        Ok(())
    }
}

pub struct ScalingFixture {
    pub a: RaggedMatrix,
    pub b: RaggedMatrix,
    pub index: DenseMentionIndex,
    pub params: EncoderParams,
    pub embeddings: EntityEmbeddings,
}

/// One timed query: `Z_{t-1}` and the mentions retrieval is fixed to.
pub struct ScalingQuery {
    pub z_prev: SparseVector,
    pub phi_q: SparseVector,
    pub support: Vec<MentionId>,
}

impl ScalingFixture {
    pub fn generate(n_entities: usize, config: &ScalingConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ n_entities as u64);
        let n_mentions = n_entities * config.mentions_per_entity;

        let mut a = RaggedBuilder::new(n_mentions);
        let mut row: Vec<u32> = Vec::with_capacity(config.mu);
        for _ in 0..n_entities {
            row.clear();
            row.extend(sample(&mut rng, n_mentions, config.mu).iter().map(|m| m as u32));
            row.sort_unstable();
            let values: Vec<f64> = (0..config.mu).map(|_| rng.gen_range(0.05..1.0)).collect();
            a.push_row(row.iter().copied().zip(values))?;
        }
        let a = a.finish();

        let mut b = RaggedBuilder::new(n_entities);
        for m in 0..n_mentions {
            b.push_row([((m / config.mentions_per_entity) as u32, 1.0)])?;
        }
        let b = b.finish();

        let vectors: Vec<Vec<f64>> = (0..n_mentions)
            .map(|_| (0..config.p).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let index = build_index(&vectors, &IndexConfig::default(), 0)?;
        drop(vectors);

        let params = EncoderParams::new(EncoderConfig {
            p: config.p,
            feature_buckets: 1 << 10,
            word_buckets: 1 << 10,
            ..EncoderConfig::default()
        })?;
        let entities: Vec<Entity> = (0..n_entities)
            .map(|e| Entity {
                entity_id: e as u32,
                surface_form: format!("entity {e}"),
                aliases: Vec::new(),
            })
            .collect();
        let embeddings = EntityEmbeddings::new(&params, &entities);
        Ok(ScalingFixture {
            a,
            b,
            index,
            params,
            embeddings,
        })
    }

    pub fn context(&self) -> ReasonerContext<'_> {
        ReasonerContext {
            index: &self.index,
            a: &self.a,
            b: &self.b,
            params: &self.params,
            embeddings: &self.embeddings,
        }
    }

    pub fn n_entities(&self) -> usize {
        self.a.n_rows()
    }

    pub fn n_mentions(&self) -> usize {
        self.a.n_cols()
    }

    pub fn memory_bytes(&self) -> usize {
        self.a.memory_bytes() + self.b.memory_bytes() + self.index.memory_bytes()
    }

    /// `K` uniformly weighted entities per query, with retrieval drawn from
    /// their expansion.
    pub fn queries(&self, n: usize, k: usize, seed: u64) -> Result<Vec<ScalingQuery>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let feature_buckets = self.params.config().feature_buckets;
        (0..n)
            .map(|_| {
                let mut ents: Vec<u32> =
                    sample(&mut rng, self.n_entities(), k).iter().map(|e| e as u32).collect();
                ents.sort_unstable();
                let z_prev = SparseVector::new(self.n_entities(), ents, vec![1.0 / k as f64; k])?;
                let expanded = spvec_ragged_matmul(&z_prev, &self.a)?;
                let take = k.min(expanded.nnz());
                let mut support: Vec<MentionId> = sample(&mut rng, expanded.nnz(), take)
                    .iter()
                    .map(|i| expanded.indices()[i])
                    .collect();
                support.sort_unstable();
                let mut feats: Vec<(u32, f64)> =
                    (0..8).map(|_| (rng.gen_range(0..feature_buckets as u32), 1.0)).collect();
                feats.sort_unstable_by_key(|f| f.0);
                feats.dedup_by_key(|f| f.0);
                let phi_q = SparseVector::from_pairs(feature_buckets, feats)?;
                Ok(ScalingQuery {
                    z_prev,
                    phi_q,
                    support,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n_entities: usize,
    pub n_mentions: usize,
    pub a_nnz: usize,
    pub memory_bytes: usize,
    /// `μ|E| + p|M|`, the memory bound the matrices and index should track.
    pub memory_bound: usize,
    pub matmul_us: f64,
    pub follow_us: f64,
}

fn fastest(rounds: usize, n: usize, mut pass: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = Duration::MAX;
    for _ in 0..rounds {
        let t = Instant::now();
        pass()?;
        best = best.min(t.elapsed());
    }
    Ok(best.as_secs_f64() * 1e6 / n as f64)
}

/// Mean per-query latency of `Z_{t-1}ᵀ A` and of one full follow step.
pub fn time_fixture(fixture: &ScalingFixture, config: &ScalingConfig) -> Result<ScalingRow> {
    let queries = fixture.queries(config.queries, config.k, config.seed)?;
    let ctx = fixture.context();
    let follow_config = FollowConfig {
        k: config.k,
        ..FollowConfig::default()
    };
    let matmul_us = fastest(config.rounds, queries.len(), || {
        for q in &queries {
            std::hint::black_box(spvec_ragged_matmul(&q.z_prev, &fixture.a)?);
        }
        Ok(())
    })?;
    let follow_us = fastest(config.rounds, queries.len(), || {
        for q in &queries {
            let out = follow(&ctx, &q.z_prev, &q.phi_q, 1, &follow_config, Retrieval::Fixed(&q.support))?;
            std::hint::black_box(out);
        }
        Ok(())
    })?;
    Ok(ScalingRow {
        n_entities: fixture.n_entities(),
        n_mentions: fixture.n_mentions(),
        a_nnz: fixture.a.nnz(),
        memory_bytes: fixture.memory_bytes(),
        memory_bound: config.mu * fixture.n_entities() + config.p * fixture.n_mentions(),
        matmul_us,
        follow_us,
    })
}

/// Generates and times one fixture per size, freeing each before the next.
pub fn run_scaling(config: &ScalingConfig) -> Result<Vec<ScalingRow>> {
    config.validate()?;
    config
        .sizes
        .iter()
        .map(|&n| {
            let fixture = ScalingFixture::generate(n, config)?;
            let row = time_fixture(&fixture, config)?;
            log::info!("|E| = {n}: follow {:.1} us, matmul {:.1} us", row.follow_us, row.matmul_us);
            Ok(row)
        })
        .collect()
}

/// Follow latency at the largest size over the smallest.
pub fn follow_growth(rows: &[ScalingRow]) -> f64 {
    match (rows.first(), rows.last()) {
        (Some(first), Some(last)) => last.follow_us / first.follow_us,
        _ => 1.0,
    }
}
