//! Detection AP, segmentation metrics and the anatomy-rule filter.

mod ap;
mod filter;
mod runner;
mod seg;

pub use ap::{compute_ap, pr_curve, pr_curves_csv, ApReport, ClassAp, PrCurve, COCO_IOU_THRESHOLDS};
pub use filter::{allowed_coverage, box_pixel_range, domain_rule_filter, DiseaseRuleTable, DEFAULT_FILTER_THRESHOLD};
pub use seg::{compute_seg_metrics, report_from_confusion, ClassSegMetrics, ConfusionMatrix, SegReport};
pub use runner::{evaluate, predict, EvalOptions, EvalReport, EvalTask, Prediction};
