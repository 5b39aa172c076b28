//! Decoupled detection head, decoding and suppression.

mod boxes;
mod decode;
mod head;
mod nms;

pub use boxes::{box_iou, BBox};
pub use decode::{decode_cell, decode_image, decode_predictions, Detection, MAX_LOG_SIZE};
pub use head::{DetectionHead, HeadOutputs, HeadVars, LevelOutputs, LevelVars, LevelView, SampleHead};
pub use nms::{detection_order, nms};

/// Default score threshold for evaluation; AP needs low-confidence predictions.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.01;
pub const DEFAULT_NMS_IOU: f64 = 0.65;
