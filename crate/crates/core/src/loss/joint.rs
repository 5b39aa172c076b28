//! Per-sample masked joint loss and its batched graph node.

use ctxdet_tensor::{exec, Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::assign::AssignStrategy;
use super::detection::{detection_loss, detection_loss_with_grad, DetectionTerms, LevelGrads};
use super::segmentation::{segmentation_loss, segmentation_loss_with_grad, OverlapLoss, SegmentationTerms};
use super::targets::SampleTarget;
use crate::detection::{HeadOutputs, SampleHead};
use crate::model::ForwardVars;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub assign: AssignStrategy,
    pub overlap: OverlapLoss,
}

/// Loss terms of one sample, or their per-term mean over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_reg: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_ce: f64,
    pub l_iou: f64,
    pub l_det: f64,
    pub l_seg: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Composes the breakdown; a missing task contributes exact zeros.
    pub fn from_terms(det: Option<DetectionTerms>, seg: Option<SegmentationTerms>) -> Self {
        let d = det.unwrap_or_default();
        let s = seg.unwrap_or_default();
        let l_det = d.l_reg + d.l_obj + d.l_cls;
        let l_seg = s.l_ce + s.l_iou;
        LossBreakdown {
            l_reg: d.l_reg,
            l_obj: d.l_obj,
            l_cls: d.l_cls,
            l_ce: s.l_ce,
            l_iou: s.l_iou,
            l_det,
            l_seg,
            total: l_det + l_seg,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_reg, self.l_obj, self.l_cls, self.l_ce, self.l_iou, self.l_det, self.l_seg, self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Per-term arithmetic mean, summed in slice order.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        Self::sum_over(items, items.len().max(1))
    }

    /// Per-term sum divided by `denominator`, summed in slice order.
    pub fn sum_over(items: &[LossBreakdown], denominator: usize) -> LossBreakdown {
        let n = denominator as f64;
        let mut m = LossBreakdown::default();
        for b in items {
            m.l_reg += b.l_reg;
            m.l_obj += b.l_obj;
            m.l_cls += b.l_cls;
            m.l_ce += b.l_ce;
            m.l_iou += b.l_iou;
            m.l_det += b.l_det;
            m.l_seg += b.l_seg;
            m.total += b.total;
        }
        m.l_reg /= n;
        m.l_obj /= n;
        m.l_cls /= n;
        m.l_ce /= n;
        m.l_iou /= n;
        m.l_det /= n;
        m.l_seg /= n;
        m.total /= n;
        m
    }
}

/// Joint loss of one sample. Only the task owning the sample's labels is
/// evaluated; `seg_logits` may be at any resolution and is resized to the mask.
pub fn joint_loss<T: Scalar>(
    head: Option<&SampleHead<'_, T>>,
    seg_logits: Option<&Tensor<T>>,
    target: &SampleTarget,
    config: &LossConfig,
) -> Result<LossBreakdown> {
    match target {
        SampleTarget::Detection(t) => {
            let head = head.ok_or_else(|| Error::Config("detection sample needs detection head outputs".into()))?;
            Ok(LossBreakdown::from_terms(Some(detection_loss(head, t, config.assign)), None))
        }
        SampleTarget::Segmentation(t) => {
            let logits =
                seg_logits.ok_or_else(|| Error::Config("segmentation sample needs segmentation logits".into()))?;
            let terms = segmentation_loss(logits, t, config.overlap)?;
            Ok(LossBreakdown::from_terms(None, Some(terms)))
        }
    }
}

/// Scalar loss node for a batch plus the per-sample breakdowns it averages.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub var: Var,
    pub per_sample: Vec<LossBreakdown>,
    /// Per-term sum over samples divided by the loss denominator.
    pub mean: LossBreakdown,
}

enum SampleGrad {
    Detection(Vec<LevelGrads>),
    Segmentation(Vec<f64>),
}

/// Adds the batch-mean joint loss to `g` as a single scalar node whose local
/// gradients are computed analytically per sample. Logits of samples that do
/// not own a task receive exactly zero gradient from that task.
pub fn batch_joint_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    forward: &ForwardVars,
    targets: &[SampleTarget],
    config: &LossConfig,
) -> Result<BatchLoss> {
    batch_joint_loss_over(g, forward, targets, config, targets.len())
}

/// [`batch_joint_loss`] with the per-sample sum divided by `denominator`
/// instead of the number of targets. Single-task training passes the full
/// configured batch size, so the task it drops counts as masked zeros and the
/// remaining task keeps the gradient scale it has in a mixed batch.
pub fn batch_joint_loss_over<T: Scalar>(
    g: &mut Graph<'_, T>,
    forward: &ForwardVars,
    targets: &[SampleTarget],
    config: &LossConfig,
    denominator: usize,
) -> Result<BatchLoss> {
    let batch = targets.len();
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    if denominator < batch {
        return Err(Error::Config(format!("loss denominator {denominator} below batch size {batch}")));
    }
    let needs_det = targets.iter().any(|t| matches!(t, SampleTarget::Detection(_)));
    let seg_size = targets.iter().find_map(|t| match t {
        SampleTarget::Segmentation(s) => Some((s.mask.height, s.mask.width)),
        _ => None,
    });
    if needs_det && forward.head.is_none() {
        return Err(Error::Config("batch has detection samples but the detection branch did not run".into()));
    }

    let head_vars = forward.head.as_ref().filter(|_| needs_det);
    let head = head_vars.map(|h| HeadOutputs::from_graph(g, h));
    let seg_var = match seg_size {
        Some((h, w)) => {
            let ctx = forward
                .context
                .as_ref()
                .ok_or_else(|| Error::Config("batch has segmentation samples but the SCE module did not run".into()))?;
            let (_, _, lh, lw) = g.value(ctx.seg_logits).dims4();
            Some(if (lh, lw) == (h, w) {
                ctx.seg_logits
            } else {
                g.resize_bilinear(ctx.seg_logits, h, w)
            })
        }
        None => None,
    };
    let seg_value = seg_var.map(|v| g.value(v));
    if let (Some(v), Some((h, w))) = (seg_value, seg_size) {
        let (n, _, vh, vw) = v.dims4();
        if n != batch || (vh, vw) != (h, w) {
            return Err(Error::shape("segmentation logits", &[batch, 0, h, w], v.shape()));
        }
    }
    if let Some(h) = &head {
        if h.batch_size() != batch {
            return Err(Error::shape("head outputs", &[batch], &[h.batch_size()]));
        }
    }

    let results: Vec<Result<(LossBreakdown, SampleGrad)>> = exec::map_indices(batch, |b| match &targets[b] {
        SampleTarget::Detection(t) => {
            let sample = head.as_ref().expect("checked above").sample(b);
            let (terms, grads) = detection_loss_with_grad(&sample, t, config.assign);
            Ok((LossBreakdown::from_terms(Some(terms), None), SampleGrad::Detection(grads)))
        }
        SampleTarget::Segmentation(t) => {
            let v = seg_value.expect("checked above");
            let k = v.shape()[1];
            let (terms, grad) = segmentation_loss_with_grad(v.item(b), k, t, config.overlap)?;
            Ok((LossBreakdown::from_terms(None, Some(terms)), SampleGrad::Segmentation(grad)))
        }
    });

    let scale = 1.0 / denominator as f64;
    let mut per_sample = Vec::with_capacity(batch);
    let mut inputs = Vec::new();
    let mut locals: Vec<Tensor<T>> = Vec::new();
    if let Some(hv) = head_vars {
        for l in &hv.levels {
            for v in [l.class_logits, l.box_regression, l.objectness_logits] {
                inputs.push(v);
                locals.push(Tensor::zeros(g.shape(v)));
            }
        }
    }
    let seg_slot = seg_var.map(|v| {
        inputs.push(v);
        locals.push(Tensor::zeros(g.shape(v)));
        locals.len() - 1
    });
    for (b, r) in results.into_iter().enumerate() {
        let (breakdown, grad) = r?;
        per_sample.push(breakdown);
        match grad {
            SampleGrad::Detection(levels) => {
                for (l, lg) in levels.iter().enumerate() {
                    for (j, src) in [&lg.cls, &lg.reg, &lg.obj].into_iter().enumerate() {
                        let dst = locals[3 * l + j].item_mut(b);
                        for (d, s) in dst.iter_mut().zip(src.iter()) {
                            *d = T::of(s * scale);
                        }
                    }
                }
            }
            SampleGrad::Segmentation(grad) => {
                let dst = locals[seg_slot.expect("segmentation slot")].item_mut(b);
                for (d, s) in dst.iter_mut().zip(&grad) {
                    *d = T::of(s * scale);
                }
            }
        }
    }
    let mean = LossBreakdown::sum_over(&per_sample, denominator);
    let var = g.custom_scalar(&inputs, T::of(mean.total), locals);
    Ok(BatchLoss { var, per_sample, mean })
}
