//! Edge scoring head.
//!
//! Every candidate edge becomes two directed tokens, one in the group of each
//! endpoint. A token is the 20-value edge feature vector projected to width
//! `D_h`. Tokens attend to the other tokens of their group through multi-head
//! self-attention whose scores carry a uniform penalty `-λ` off the diagonal,
//! then pass through a residual connection and a two-layer ReLU MLP that
//! emits one logit per token. `λ` is learned along with everything else.
//!
//! Computation is in `f64`; weights persist as `f32`.

mod attention;
pub mod linalg;
mod score;
mod train;
mod weights;

pub use attention::{
    attention_maps, bce_with_logit, forward, groups_from_ids, loss_and_grad, TrainBatch,
};
pub use linalg::Matrix;
pub use score::{directed_tokens, score_candidates, score_edges, score_edges_pyramid, DirectedTokens};
pub use train::{train, TrainConfig, TrainOutcome};
pub use weights::{init_weights, HeadShape, HeadWeights, NamedTensor, PARAM_NAMES};
