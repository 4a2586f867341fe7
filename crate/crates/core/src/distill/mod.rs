//! Distillation and re-identification losses: the BN-neck classifier
//! head, parameter-free feature alignment, the logits KL, cross entropy,
//! batch-hard triplet, and the weighted training objective.

mod align;
mod head;
mod losses;

pub use align::{align_features, align_var, aligned_pair, init_alignment, Alignment, Direction, Method};
pub use head::{has_bn_neck, head_forward, init_head, neck_eval, update_running_stats, HeadOutput, BN_EPS, BN_MOMENTUM};
pub use losses::{
    cls_loss, feature_loss, kl_logits_loss, npkd_loss, total_loss, triplet_loss, KdParts, KlDirection, LossParts, LossWeights,
    LABEL_SMOOTHING, TRIPLET_MARGIN,
};
