use serde::{Deserialize, Serialize};

use ctxdet_tensor::exec;

use crate::sce::LabelMask;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSegMetrics {
    pub class_id: usize,
    pub gt_pixels: u64,
    pub iou: f64,
    pub dice: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub miou: f64,
    pub mdice: f64,
    pub macc: f64,
    /// Classes present in the ground truth.
    pub per_class: Vec<ClassSegMetrics>,
}

/// `num_labels x num_labels` counts, row = ground truth, column = prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_labels: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_labels: usize) -> Self {
        ConfusionMatrix {
            num_labels,
            counts: vec![0; num_labels * num_labels],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_labels + pred]
    }

    fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape("predicted mask", &[gt.height, gt.width], &[pred.height, pred.width]));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_labels || g >= self.num_labels {
                return Err(Error::Target(format!(
                    "mask label {} out of range for {} labels",
                    p.max(g),
                    self.num_labels
                )));
            }
            self.counts[g * self.num_labels + p] += 1;
        }
        Ok(())
    }

    fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-class IoU, Dice and accuracy from a confusion matrix pooled over all
/// images; means run over classes present in the ground truth.
pub fn compute_seg_metrics(pred_masks: &[LabelMask], gt_masks: &[LabelMask], num_labels: usize) -> Result<SegReport> {
    if pred_masks.len() != gt_masks.len() {
        return Err(Error::shape("predicted masks", &[gt_masks.len()], &[pred_masks.len()]));
    }
    let partial = exec::map_indices(pred_masks.len(), |i| {
        let mut m = ConfusionMatrix::new(num_labels);
        m.accumulate(&pred_masks[i], &gt_masks[i]).map(|_| m)
    });
    let mut cm = ConfusionMatrix::new(num_labels);
    for m in partial {
        cm.merge(&m?);
    }
    Ok(report_from_confusion(&cm))
}

pub fn report_from_confusion(cm: &ConfusionMatrix) -> SegReport {
    let k = cm.num_labels;
    let per_class: Vec<ClassSegMetrics> = (0..k)
        .filter_map(|c| {
            let tp = cm.get(c, c);
            let gt: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            if gt == 0 {
                return None;
            }
            let pred: u64 = (0..k).map(|g| cm.get(g, c)).sum();
            let (fp, fn_) = (pred - tp, gt - tp);
            Some(ClassSegMetrics {
                class_id: c,
                gt_pixels: gt,
                iou: tp as f64 / (tp + fp + fn_) as f64,
                dice: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
                accuracy: tp as f64 / gt as f64,
            })
        })
        .collect();
    let n = per_class.len().max(1) as f64;
    SegReport {
        miou: per_class.iter().map(|c| c.iou).sum::<f64>() / n,
        mdice: per_class.iter().map(|c| c.dice).sum::<f64>() / n,
        macc: per_class.iter().map(|c| c.accuracy).sum::<f64>() / n,
        per_class,
    }
}
