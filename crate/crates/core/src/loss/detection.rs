//! Detection loss: `1 - IoU` regression, objectness and per-class binary
//! cross-entropy, with analytic gradients with respect to the raw head outputs.

use ctxdet_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::assign::{assign_targets, AssignStrategy, Assignment};
use super::targets::DetectionTarget;
use crate::detection::{decode_cell, BBox, SampleHead, MAX_LOG_SIZE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionTerms {
    pub l_reg: f64,
    pub l_obj: f64,
    pub l_cls: f64,
}

impl DetectionTerms {
    pub fn sum(&self) -> f64 {
        self.l_reg + self.l_obj + self.l_cls
    }
}

/// Loss gradients for one sample at one level, laid out like [`crate::detection::LevelView`].
#[derive(Clone, Debug, PartialEq)]
pub struct LevelGrads {
    pub cls: Vec<f64>,
    pub reg: Vec<f64>,
    pub obj: Vec<f64>,
}

/// Binary cross-entropy on a logit, `softplus(z) - t * z`.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z
}

fn sigmoid(z: f64) -> f64 {
    ctxdet_tensor::sigmoid(z)
}

/// IoU of `pred` against `gt` and its partial derivatives with respect to
/// `(x1, y1, x2, y2)` of `pred`. The gradient is zero where the boxes do not
/// intersect.
pub fn iou_with_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let iw = pred.x2.min(gt.x2) - pred.x1.max(gt.x1);
    let ih = pred.y2.min(gt.y2) - pred.y1.max(gt.y1);
    if iw <= 0.0 || ih <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let (pw, ph) = (pred.width(), pred.height());
    let inter = iw * ih;
    let union = pw * ph + gt.area() - inter;
    let iou = inter / union;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    let di = [
        if pred.x1 > gt.x1 { -ih } else { 0.0 },
        if pred.y1 > gt.y1 { -iw } else { 0.0 },
        if pred.x2 < gt.x2 { ih } else { 0.0 },
        if pred.y2 < gt.y2 { iw } else { 0.0 },
    ];
    let da = [-ph, -pw, ph, pw];
    (iou, std::array::from_fn(|k| d_inter * di[k] + d_area * da[k]))
}

/// Detection terms for one image, assigning targets with `strategy` first.
pub fn detection_loss<T: Scalar>(
    sample: &SampleHead<'_, T>,
    target: &DetectionTarget,
    strategy: AssignStrategy,
) -> DetectionTerms {
    let assignment = assign_targets(sample, target, strategy);
    evaluate(sample, target, &assignment, false).0
}

/// Like [`detection_loss`], also returning per-level gradients.
pub fn detection_loss_with_grad<T: Scalar>(
    sample: &SampleHead<'_, T>,
    target: &DetectionTarget,
    strategy: AssignStrategy,
) -> (DetectionTerms, Vec<LevelGrads>) {
    let assignment = assign_targets(sample, target, strategy);
    evaluate(sample, target, &assignment, true)
}

/// Detection terms under a precomputed assignment.
pub fn detection_loss_assigned<T: Scalar>(
    sample: &SampleHead<'_, T>,
    target: &DetectionTarget,
    assignment: &Assignment,
) -> DetectionTerms {
    evaluate(sample, target, assignment, false).0
}

fn evaluate<T: Scalar>(
    sample: &SampleHead<'_, T>,
    target: &DetectionTarget,
    assignment: &Assignment,
    with_grad: bool,
) -> (DetectionTerms, Vec<LevelGrads>) {
    let num_pos = assignment.num_positives();
    let obj_norm = num_pos.max(1) as f64;
    let mut terms = DetectionTerms::default();
    let mut grads = Vec::new();

    for (l, level) in sample.levels.iter().enumerate() {
        let cells = level.cells();
        let mut g = if with_grad {
            LevelGrads {
                cls: vec![0.0; level.num_classes * cells],
                reg: vec![0.0; 4 * cells],
                obj: vec![0.0; cells],
            }
        } else {
            LevelGrads {
                cls: Vec::new(),
                reg: Vec::new(),
                obj: Vec::new(),
            }
        };
        let matches = &assignment.levels[l];
        for cell in 0..cells {
            let z = level.obj[cell].as_f64();
            let t = if matches[cell].is_some() { 1.0 } else { 0.0 };
            terms.l_obj += bce_with_logits(z, t) / obj_norm;
            if with_grad {
                g.obj[cell] = (sigmoid(z) - t) / obj_norm;
            }
        }
        if num_pos > 0 {
            let n = num_pos as f64;
            let s = level.stride as f64;
            for (cell, gi) in matches.iter().enumerate().filter_map(|(c, m)| m.map(|g| (c, g))) {
                let class = target.class_ids[gi];
                for k in 0..level.num_classes {
                    let z = level.cls_at(k, cell).as_f64();
                    let t = if k == class { 1.0 } else { 0.0 };
                    terms.l_cls += bce_with_logits(z, t) / n;
                    if with_grad {
                        g.cls[k * cells + cell] = (sigmoid(z) - t) / n;
                    }
                }
                let reg = level.reg_at(cell).map(|v| v.as_f64());
                let pred = decode_cell(reg, cell / level.w, cell % level.w, level.stride);
                let (iou, d) = iou_with_grad(&pred, &target.boxes[gi]);
                terms.l_reg += (1.0 - iou) / n;
                if with_grad {
                    // x1 = cx - w/2, x2 = cx + w/2 with cx = (col + dx) s, w = exp(dw) s
                    let d_cx = d[0] + d[2];
                    let d_cy = d[1] + d[3];
                    let d_w = 0.5 * (d[2] - d[0]);
                    let d_h = 0.5 * (d[3] - d[1]);
                    let dw = if reg[2] < MAX_LOG_SIZE { pred.width() * d_w } else { 0.0 };
                    let dh = if reg[3] < MAX_LOG_SIZE { pred.height() * d_h } else { 0.0 };
                    for (k, v) in [s * d_cx, s * d_cy, dw, dh].into_iter().enumerate() {
                        g.reg[k * cells + cell] = -v / n;
                    }
                }
            }
        }
        grads.push(g);
    }
    (terms, grads)
}
