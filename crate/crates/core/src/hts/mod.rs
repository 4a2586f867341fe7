//! Hierarchical token sparsification: keep/drop prediction, Gumbel
//! sampling, cumulative masking, masked attention, class-attention
//! reweighting, keep-ratio supervision and inference-time pruning.

mod attention;
mod gumbel;
mod ops;
mod predictor;
mod schedule;
mod state;

pub use attention::{attention_weights, class_attention, masked_attention};
pub use gumbel::{gumbel, gumbel_keep, gumbel_noise, gumbel_sample, Relaxation};
pub use ops::{class_attn_reweight, prune_for_inference, ratio_loss, top_k_positions, update_mask, Pruned};
pub use predictor::{init_predictor, predict_keep_probs, predict_log_probs};
pub use schedule::{keep_count, SparsifySchedule};
pub use state::{DecisionState, StageDecision};

/// Initial value of the learnable class-attention reweight scale.
pub const REWEIGHT_INIT: f64 = 0.5;

/// Gumbel-Softmax temperature; constant, no annealing.
pub const GUMBEL_TAU: f64 = 1.0;

#[cfg(test)]
mod tests;
