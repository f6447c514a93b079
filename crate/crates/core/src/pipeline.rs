//! One declarative run configuration and the stage functions that turn a
//! corpus into trained, queryable artifacts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, KnowledgeBase, Linker, MultiHopQuestion, QuestionLinker, SyntheticConfig};
use crate::dense_index::{DenseMentionIndex, IndexConfig};
use crate::encoders::{EncoderConfig, EncoderParams, EntityEmbeddings};
use crate::error::{Error, Result};
use crate::featurize::{
    build_coref_matrix, build_entity_mention_matrix, fit_tfidf, CoocConfig, HashedTfidfModel,
    SurfaceIndex, TfidfConfig,
};
use crate::reasoner::{Aggregation, FollowConfig};
use crate::scaling::ScalingConfig;
use crate::sparse::RaggedMatrix;
use crate::training::{
    evaluate, freeze_and_index, generate_pretraining_data, group_examples, make_negatives,
    pretrain_mention_encoder, in_split, train_end_to_end, FrozenState, HopMode, PretrainConfig,
    PretrainReport, PreparedQuestion, SlotFillingExample, TrainConfig,
};

/// Every setting that affects results. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthetic: SyntheticConfig,
    pub tfidf: TfidfConfig,
    pub cooc: CoocConfig,
    pub encoder: EncoderConfig,
    pub index: IndexConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub qps: QpsConfig,
    pub scaling: ScalingConfig,
    pub ablation: AblationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QpsConfig {
    pub ks: Vec<usize>,
    /// Dev questions timed per setting; 0 uses all.
    pub max_queries: usize,
    /// Worker threads of the parallel run; 0 uses the available cores.
    pub threads: usize,
}

impl Default for QpsConfig {
    fn default() -> Self {
        QpsConfig {
            ks: vec![10, 100, 1000],
            max_queries: 300,
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Hop count of the questions the arms are trained and scored on.
    pub hops: usize,
    /// Retrain every arm from the pretrained encoder; otherwise the arms
    /// only change the follow settings of an already trained model.
    pub retrain: bool,
    pub epochs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            hops: 2,
            retrain: true,
            epochs: 3,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.cooc.validate()?;
        self.encoder.validate()?;
        self.pretrain.sgd.validate()?;
        self.pretrain.negatives.validate()?;
        self.train.validate()?;
        self.scaling.validate()?;
        if self.qps.ks.contains(&0) {
            return Err(Error::Config("qps.ks entries must be >= 1".into()));
        }
        if self.ablation.hops == 0 || self.ablation.hops > self.encoder.n_hops {
            return Err(Error::Config("ablation.hops must be within the encoder's hops".into()));
        }
        if !self.tfidf.n_buckets.is_power_of_two() {
            return Err(Error::Config("tfidf.n_buckets must be a power of two".into()));
        }
        Ok(())
    }
}

/// TFIDF model, `A`, `B` and the question linker for one corpus.
#[derive(Debug, Clone)]
pub struct Featurized {
    pub tfidf: HashedTfidfModel,
    pub a: RaggedMatrix,
    pub b: RaggedMatrix,
}

pub fn featurize(corpus: &Corpus, tfidf: &TfidfConfig, cooc: &CoocConfig) -> Result<Featurized> {
    if corpus.n_mentions() == 0 {
        return Err(Error::Validation("corpus has no entity mentions".into()));
    }
    let model = fit_tfidf(corpus, tfidf)?;
    let a = build_entity_mention_matrix(&model, corpus, cooc)?;
    let b = build_coref_matrix(corpus);
    Ok(Featurized { tfidf: model, a, b })
}

pub fn question_linker(corpus: &Corpus, tfidf: &HashedTfidfModel) -> Result<QuestionLinker> {
    Ok(QuestionLinker::new(
        Linker::new(corpus.entities())?,
        corpus.entity_frequencies(),
        SurfaceIndex::new(tfidf, corpus),
    ))
}

/// Positives whose subject falls in the held-out slot-filling split.
pub fn is_heldout(ex: &SlotFillingExample, config: &PretrainConfig) -> bool {
    let key = format!("{}:{}", ex.subject, ex.relation);
    in_split(&key, config.heldout_fraction, config.seed)
}

/// Output of the pretraining stage.
pub struct Pretrained {
    pub params: EncoderParams,
    pub index: DenseMentionIndex,
    pub report: PretrainReport,
    pub heldout: Vec<SlotFillingExample>,
}

/// Generates slot-filling data, pretrains the mention encoder on the
/// non-held-out part, then freezes it and builds the mention index.
pub fn pretrain_stage(
    corpus: &Corpus,
    kb: &KnowledgeBase,
    config: &RunConfig,
) -> Result<Pretrained> {
    let positives = generate_pretraining_data(kb, corpus);
    let (heldout, train): (Vec<_>, Vec<_>) =
        positives.into_iter().partition(|p| is_heldout(p, &config.pretrain));
    let negatives = make_negatives(&train, kb, corpus, &config.pretrain.negatives)?;
    let groups = group_examples(&train, &negatives.examples);
    let mut params = EncoderParams::new(config.encoder.clone())?;
    let linker = Linker::new(corpus.entities())?;
    let report = pretrain_mention_encoder(&mut params, corpus, &groups, Some(&linker), &config.pretrain)?;
    let index = freeze_and_index(&params, corpus, &config.index)?;
    Ok(Pretrained {
        params,
        index,
        report,
        heldout,
    })
}

/// Every question of a dataset in one list.
pub fn all_questions(questions: &[Vec<MultiHopQuestion>]) -> Vec<MultiHopQuestion> {
    questions.iter().flatten().cloned().collect()
}

/// One toggle of the follow settings compared against the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationArm {
    Full,
    NoTfidf,
    Lambda1,
    SumAggregation,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Full,
        AblationArm::NoTfidf,
        AblationArm::Lambda1,
        AblationArm::SumAggregation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationArm::Full => "full",
            AblationArm::NoTfidf => "no_tfidf",
            AblationArm::Lambda1 => "lambda_1",
            AblationArm::SumAggregation => "sum_aggregation",
        }
    }

    pub fn apply(self, base: &FollowConfig) -> FollowConfig {
        let mut c = base.clone();
        match self {
            AblationArm::Full => {}
            AblationArm::NoTfidf => c.tfidf_filter = false,
            AblationArm::Lambda1 => c.lambda = 1.0,
            AblationArm::SumAggregation => c.aggregation = Aggregation::Sum,
        }
        c
    }
}

/// Dev Hits@1 of one arm on one question subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    /// `all` or `multi_answer`.
    pub subset: String,
    pub n: usize,
    pub hits_at_1: f64,
    /// Against the full arm on the same subset.
    pub delta: f64,
}

/// Paired runs of every arm on the `config.hops`-hop questions. All arms
/// start from `params` and share the training seed, split and order, so
/// the full arm run twice gives identical numbers.
pub fn ablate(
    params: &EncoderParams,
    frozen: FrozenState<'_>,
    entities: &[crate::corpus::Entity],
    questions: &[PreparedQuestion],
    train: &TrainConfig,
    config: &AblationConfig,
    arms: &[AblationArm],
) -> Result<Vec<AblationRow>> {
    let subset: Vec<PreparedQuestion> =
        questions.iter().filter(|q| q.hops == config.hops).cloned().collect();
    let dev: Vec<PreparedQuestion> = subset.iter().filter(|q| q.dev).cloned().collect();
    let multi: Vec<PreparedQuestion> = dev.iter().filter(|q| q.answers.len() > 1).cloned().collect();
    if dev.is_empty() {
        return Err(Error::Validation(format!("no {}-hop dev questions", config.hops)));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for &arm in arms {
        let follow = arm.apply(&train.follow);
        let mut p = params.clone();
        if config.retrain {
            let arm_train = TrainConfig {
                follow: follow.clone(),
                epochs: config.epochs,
                hop_mode: HopMode::Known,
                ..train.clone()
            };
            train_end_to_end(&mut p, frozen, entities, &subset, &arm_train, None)?;
        }
        let emb = EntityEmbeddings::new(&p, entities);
        let ctx = frozen.context(&p, &emb);
        for (name, qs) in [("all", &dev), ("multi_answer", &multi)] {
            if qs.is_empty() {
                continue;
            }
            let report = evaluate(&ctx, qs, &follow, HopMode::Known)?;
            let hits_at_1 = report.hits.at(1).unwrap_or(0.0);
            log::info!("ablation {} / {name}: hits@1 {hits_at_1:.3}", arm.name());
            rows.push(AblationRow {
                arm,
                subset: name.to_string(),
                n: qs.len(),
                hits_at_1,
                delta: 0.0,
            });
        }
    }
    let base: Vec<(String, f64)> = rows
        .iter()
        .filter(|r| r.arm == AblationArm::Full)
        .map(|r| (r.subset.clone(), r.hits_at_1))
        .collect();
    for r in &mut rows {
        if let Some((_, b)) = base.iter().find(|(s, _)| *s == r.subset) {
            r.delta = r.hits_at_1 - b;
        }
    }
    Ok(rows)
}
