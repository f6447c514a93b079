//! Hashed-feature linear encoders standing in for the transformer mention
//! and query encoders, entity embeddings, gradient buffers, the optimizer
//! and checkpoint I/O.

mod features;
mod model;
mod optim;
mod params;

pub use features::{
    masked_question_tokens, mention_features, query_features, EncoderConfig, MentionFeatures,
    ENTITY_PLACEHOLDER,
};
pub use model::EntityEmbeddings;
pub use optim::{Sgd, SgdConfig};
pub use params::{EncoderParams, Gradients, ParamId, Tensor};
