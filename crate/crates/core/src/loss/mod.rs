//! Label assignment, detection and segmentation losses, and the masked joint loss.

mod assign;
mod detection;
mod joint;
mod segmentation;
mod targets;

pub use assign::{assign_targets, best_level, AssignStrategy, Assignment, DEFAULT_CENTER_RADIUS};
pub use detection::{
    bce_with_logits, detection_loss, detection_loss_assigned, detection_loss_with_grad, iou_with_grad,
    DetectionTerms, LevelGrads,
};
pub use joint::{batch_joint_loss, batch_joint_loss_over, joint_loss, BatchLoss, LossBreakdown, LossConfig};
pub use segmentation::{
    segmentation_loss, segmentation_loss_with_grad, OverlapLoss, SegmentationTerms, ABSENT_CLASS_MASS,
};
pub use targets::{DetectionTarget, SampleTarget, SegmentationTarget};
