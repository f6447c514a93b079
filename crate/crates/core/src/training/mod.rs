//! Distant-supervision pretraining of the mention encoder and staged
//! end-to-end training of the query side.

mod data;
mod e2e;
mod metrics;
mod pretrain;

pub use data::{
    generate_pretraining_data, in_split, make_negatives, passage_has_answer, slot_filling_query,
    verify_example, ExampleLabel, NegativeConfig, NegativeSet, SlotFillingExample,
};
pub use e2e::{
    evaluate, predict, prepare_questions, question_loss, train_end_to_end, EvalReport,
    FrozenState, HopMode, MetricRecord, PreparedQuestion, Prediction, TrainConfig,
    LINK_FALLBACK_N,
};
pub use metrics::{evaluate_hits, rank_entities, retrieval_accuracy, HitsReport, DEFAULT_KS};
pub use pretrain::{
    candidates, corpus_features, freeze_and_index, group_examples, pretrain_mention_encoder,
    slot_filling_accuracy, slot_query, span_loss, PretrainConfig, PretrainGroup, PretrainReport, SpanQuery,
    SlotFillingAccuracy, SpanCandidates, PRETRAIN_PARAMS,
};
