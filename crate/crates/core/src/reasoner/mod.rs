//! The differentiable follow operation, multi-hop chaining, the hop
//! mixture, the answer loss and their backward passes.

mod chain;
mod follow;

pub use chain::{
    add_sparse, hop_mixture, hop_mixture_backward, loss_and_grad, multi_hop, multi_hop_backward,
    LossOutput, MixtureTrace, MASS_FLOOR,
};
pub use follow::{
    follow, follow_backward, Aggregation, FollowConfig, FollowTrace, ReasonerContext, Retrieval,
};
