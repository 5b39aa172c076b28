//! COCO-style average precision with 101-point interpolation.

use serde::{Deserialize, Serialize};

use crate::detection::{box_iou, Detection};
use crate::loss::DetectionTarget;
use crate::{Error, Result};

/// `0.50, 0.55, ..., 0.95`
pub const COCO_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

const RECALL_POINTS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    /// AP at each requested threshold, in request order.
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap50: f64,
    pub ap75: f64,
    /// Mean over all requested thresholds.
    pub ap5095: f64,
    pub iou_thresholds: Vec<f64>,
    /// Mean over evaluated classes at each requested threshold.
    pub ap_at: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    /// Classes that had predictions but no ground truth.
    pub excluded_classes: Vec<usize>,
}

/// Precision/recall after each prediction in score order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class_id: usize,
    pub iou_threshold: f64,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Predictions of one class across images, sorted by descending score; ties
/// keep image order, then input order.
fn ranked(predictions: &[Vec<Detection>], class: usize) -> Vec<(usize, &Detection)> {
    let mut out: Vec<(usize, &Detection)> = predictions
        .iter()
        .enumerate()
        .flat_map(|(i, dets)| dets.iter().filter(move |d| d.class_id == class).map(move |d| (i, d)))
        .collect();
    out.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    out
}

/// Greedy matching: each prediction takes the unmatched ground truth of its
/// class with the highest IoU, if that IoU reaches `threshold`.
fn match_class(
    predictions: &[Vec<Detection>],
    ground_truth: &[DetectionTarget],
    class: usize,
    threshold: f64,
) -> (Vec<bool>, usize) {
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = ground_truth
        .iter()
        .map(|g| g.class_ids.iter().filter(|&&c| c == class).count())
        .sum();
    let tp = ranked(predictions, class)
        .into_iter()
        .map(|(img, det)| {
            let gt = &ground_truth[img];
            let mut best: Option<(usize, f64)> = None;
            for (j, (b, &c)) in gt.boxes.iter().zip(&gt.class_ids).enumerate() {
                if c != class || used[img][j] {
                    continue;
                }
                let iou = box_iou(&det.bbox, b);
                if iou >= threshold && best.is_none_or(|(_, v)| iou > v) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (tp, num_gt)
}

fn curve(tp: &[bool], num_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    (recall, precision)
}

/// Area under the 101-point interpolated precision envelope.
fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < level {
            k += 1;
        }
        if k < recall.len() {
            sum += envelope[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Precision-recall curve of one class at one threshold.
pub fn pr_curve(
    predictions: &[Vec<Detection>],
    ground_truth: &[DetectionTarget],
    class: usize,
    iou_threshold: f64,
) -> PrCurve {
    let (tp, num_gt) = match_class(predictions, ground_truth, class, iou_threshold);
    let (recall, precision) = curve(&tp, num_gt.max(1));
    PrCurve {
        class_id: class,
        iou_threshold,
        recall,
        precision,
    }
}

/// Average precision of `predictions[i]` against `ground_truth[i]`.
///
/// `ap50` and `ap75` are evaluated at 0.5 and 0.75 regardless of
/// `iou_thresholds`; `ap5095` averages over `iou_thresholds`. Classes without
/// ground truth are excluded from every mean.
pub fn compute_ap(
    predictions: &[Vec<Detection>],
    ground_truth: &[DetectionTarget],
    iou_thresholds: &[f64],
) -> Result<ApReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::shape("prediction images", &[ground_truth.len()], &[predictions.len()]));
    }
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("IoU thresholds must be non-empty and lie in [0, 1]".into()));
    }
    let mut classes: Vec<usize> = ground_truth.iter().flat_map(|g| g.class_ids.iter().copied()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut excluded: Vec<usize> = predictions
        .iter()
        .flatten()
        .map(|d| d.class_id)
        .filter(|c| classes.binary_search(c).is_err())
        .collect();
    excluded.sort_unstable();
    excluded.dedup();
    if !excluded.is_empty() {
        log::info!("classes {excluded:?} have no ground truth and are excluded from AP");
    }

    let class_ap = |class: usize, thr: f64| {
        let (tp, num_gt) = match_class(predictions, ground_truth, class, thr);
        let (r, p) = curve(&tp, num_gt);
        interpolated_ap(&r, &p)
    };
    let per_class: Vec<ClassAp> = classes
        .iter()
        .map(|&c| ClassAp {
            class_id: c,
            num_gt: ground_truth
                .iter()
                .map(|g| g.class_ids.iter().filter(|&&k| k == c).count())
                .sum(),
            ap: iou_thresholds.iter().map(|&t| class_ap(c, t)).collect(),
        })
        .collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    };
    let ap_at: Vec<f64> = (0..iou_thresholds.len())
        .map(|t| mean(&mut per_class.iter().map(|c| c.ap[t])))
        .collect();
    let at = |thr: f64| match iou_thresholds.iter().position(|&t| (t - thr).abs() < 1e-12) {
        Some(i) => ap_at[i],
        None => mean(&mut classes.iter().map(|&c| class_ap(c, thr))),
    };
    Ok(ApReport {
        ap50: at(0.5),
        ap75: at(0.75),
        ap5095: mean(&mut ap_at.iter().copied()),
        iou_thresholds: iou_thresholds.to_vec(),
        ap_at,
        per_class,
        excluded_classes: excluded,
    })
}

/// CSV rows `class_id,iou_threshold,rank,recall,precision`.
pub fn pr_curves_csv(curves: &[PrCurve]) -> String {
    let mut out = String::from("class_id,iou_threshold,rank,recall,precision\n");
    for c in curves {
        for (k, (r, p)) in c.recall.iter().zip(&c.precision).enumerate() {
            out.push_str(&format!("{},{},{},{r:.6},{p:.6}\n", c.class_id, c.iou_threshold, k + 1));
        }
    }
    out
}
