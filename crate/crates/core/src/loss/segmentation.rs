//! Segmentation loss: pixel-wise softmax cross-entropy plus a soft overlap term.

use ctxdet_tensor::kernels::resize::bilinear_forward;
use ctxdet_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::targets::SegmentationTarget;
use crate::{Error, Result};

/// Soft overlap measure used for the second segmentation term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapLoss {
    #[default]
    Jaccard,
    Dice,
}

/// A class absent from the target whose predicted mass is below this many
/// pixels is left out of the overlap mean.
pub const ABSENT_CLASS_MASS: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationTerms {
    pub l_ce: f64,
    pub l_iou: f64,
}

impl SegmentationTerms {
    pub fn sum(&self) -> f64 {
        self.l_ce + self.l_iou
    }
}

/// Loss of `K x h x w` (or `1 x K x h x w`) logits against `target`; the logits
/// are bilinearly resized to the mask size first.
pub fn segmentation_loss<T: Scalar>(
    seg_logits: &Tensor<T>,
    target: &SegmentationTarget,
    overlap: OverlapLoss,
) -> Result<SegmentationTerms> {
    let shape = seg_logits.shape();
    let (k, h, w) = match *shape {
        [k, h, w] | [1, k, h, w] => (k, h, w),
        _ => return Err(Error::shape("segmentation logits", &[1, 0, 0, 0], shape)),
    };
    let (mh, mw) = (target.mask.height, target.mask.width);
    let nchw = Tensor::from_vec(&[1, k, h, w], seg_logits.data().to_vec());
    let resized = if (h, w) == (mh, mw) {
        nchw
    } else {
        bilinear_forward(&nchw, mh, mw)
    };
    let (terms, _) = evaluate(resized.data(), k, target, overlap, false)?;
    Ok(terms)
}

/// Loss of logits already at the mask size (`K x H x W`, channel-major) and the
/// gradient with respect to those logits.
pub fn segmentation_loss_with_grad<T: Scalar>(
    logits: &[T],
    num_labels: usize,
    target: &SegmentationTarget,
    overlap: OverlapLoss,
) -> Result<(SegmentationTerms, Vec<f64>)> {
    evaluate(logits, num_labels, target, overlap, true)
}

fn evaluate<T: Scalar>(
    logits: &[T],
    k: usize,
    target: &SegmentationTarget,
    overlap: OverlapLoss,
    with_grad: bool,
) -> Result<(SegmentationTerms, Vec<f64>)> {
    let mask = &target.mask;
    let n = mask.height * mask.width;
    if logits.len() != k * n {
        return Err(Error::shape("segmentation logits", &[k * n], &[logits.len()]));
    }
    if let Some(&v) = mask.labels.iter().find(|&&v| v as usize >= k) {
        return Err(Error::Target(format!("mask label {v} out of range for {k} labels")));
    }

    let mut probs = vec![0.0f64; k * n];
    let mut ce = 0.0;
    for p in 0..n {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(logits[c * n + p].as_f64());
        }
        let mut z = 0.0;
        for c in 0..k {
            let e = (logits[c * n + p].as_f64() - m).exp();
            probs[c * n + p] = e;
            z += e;
        }
        for c in 0..k {
            probs[c * n + p] /= z;
        }
        let t = mask.labels[p] as usize;
        ce += m + z.ln() - logits[t * n + p].as_f64();
    }
    let l_ce = ce / n as f64;

    // Per-class sums: intersection, predicted mass, target mass.
    let mut inter = vec![0.0; k];
    let mut mass = vec![0.0; k];
    let mut count = vec![0.0; k];
    for p in 0..n {
        let t = mask.labels[p] as usize;
        inter[t] += probs[t * n + p];
        count[t] += 1.0;
        for c in 0..k {
            mass[c] += probs[c * n + p];
        }
    }
    let included: Vec<bool> = (0..k)
        .map(|c| count[c] > 0.0 || mass[c] >= ABSENT_CLASS_MASS)
        .collect();
    let m = included.iter().filter(|&&b| b).count().max(1) as f64;
    let mut score_sum = 0.0;
    // dScore_c / dp for pixels with t == c and t != c.
    let mut d_on = vec![0.0; k];
    let mut d_off = vec![0.0; k];
    for c in (0..k).filter(|&c| included[c]) {
        let (i, pm, tm) = (inter[c], mass[c], count[c]);
        match overlap {
            OverlapLoss::Jaccard => {
                let u = pm + tm - i;
                score_sum += i / u;
                // on a target pixel the intersection and the mass grow together,
                // leaving the union unchanged
                d_on[c] = 1.0 / u;
                d_off[c] = -i / (u * u);
            }
            OverlapLoss::Dice => {
                let s = pm + tm;
                score_sum += 2.0 * i / s;
                d_on[c] = 2.0 * (s - i) / (s * s);
                d_off[c] = -2.0 * i / (s * s);
            }
        }
    }
    let l_iou = 1.0 - score_sum / m;
    let terms = SegmentationTerms { l_ce, l_iou };
    if !with_grad {
        return Ok((terms, Vec::new()));
    }

    let mut grad = vec![0.0; k * n];
    let mut gp = vec![0.0; k];
    for p in 0..n {
        let t = mask.labels[p] as usize;
        let mut dot = 0.0;
        for c in 0..k {
            let d = if !included[c] {
                0.0
            } else if c == t {
                d_on[c]
            } else {
                d_off[c]
            };
            gp[c] = -d / m;
            dot += probs[c * n + p] * gp[c];
        }
        for c in 0..k {
            let pc = probs[c * n + p];
            let one_hot = if c == t { 1.0 } else { 0.0 };
            grad[c * n + p] = (pc - one_hot) / n as f64 + pc * (gp[c] - dot);
        }
    }
    Ok((terms, grad))
}
