//! Anchor-free decoding of head outputs into scored boxes.

use ctxdet_tensor::{sigmoid, Scalar};
use serde::{Deserialize, Serialize};

use super::boxes::BBox;
use super::head::{HeadOutputs, LevelView};

/// Upper bound on `dw`/`dh` before exponentiation.
pub const MAX_LOG_SIZE: f64 = 10.0;

/// One decoded prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    /// `sigmoid(objectness) * sigmoid(class logit)`
    pub score: f64,
}

/// Box encoded by regression `(dx, dy, dw, dh)` at grid cell `(row, col)`:
/// center `((col + dx) * s, (row + dy) * s)`, size `(exp(dw) * s, exp(dh) * s)`.
pub fn decode_cell(reg: [f64; 4], row: usize, col: usize, stride: usize) -> BBox {
    let s = stride as f64;
    let cx = (col as f64 + reg[0]) * s;
    let cy = (row as f64 + reg[1]) * s;
    let w = reg[2].min(MAX_LOG_SIZE).exp() * s;
    let h = reg[3].min(MAX_LOG_SIZE).exp() * s;
    BBox::from_center(cx, cy, w, h)
}

fn decode_level<T: Scalar>(
    level: &LevelView<'_, T>,
    image_size: (usize, usize),
    score_threshold: f64,
    out: &mut Vec<Detection>,
) {
    let (ih, iw) = image_size;
    for cell in 0..level.cells() {
        let obj = sigmoid(level.obj[cell].as_f64());
        if obj < score_threshold {
            continue;
        }
        let mut best = 0;
        let mut best_logit = f64::NEG_INFINITY;
        for c in 0..level.num_classes {
            let v = level.cls_at(c, cell).as_f64();
            if v > best_logit {
                best = c;
                best_logit = v;
            }
        }
        let score = obj * sigmoid(best_logit);
        if score < score_threshold {
            continue;
        }
        let reg = level.reg_at(cell).map(|v| v.as_f64());
        let bbox = decode_cell(reg, cell / level.w, cell % level.w, level.stride).clip(iw as f64, ih as f64);
        if !bbox.is_valid() {
            continue;
        }
        out.push(Detection {
            bbox,
            class_id: best,
            score: score.clamp(0.0, 1.0),
        });
    }
}

/// Decodes one batch item. `image_size` is `(height, width)`.
pub fn decode_image<T: Scalar>(
    outputs: &HeadOutputs<T>,
    index: usize,
    image_size: (usize, usize),
    score_threshold: f64,
) -> Vec<Detection> {
    let sample = outputs.sample(index);
    let mut out = Vec::new();
    for level in &sample.levels {
        decode_level(level, image_size, score_threshold, &mut out);
    }
    out
}

/// Decodes every batch item.
pub fn decode_predictions<T: Scalar>(
    outputs: &HeadOutputs<T>,
    image_size: (usize, usize),
    score_threshold: f64,
) -> Vec<Vec<Detection>> {
    (0..outputs.batch_size())
        .map(|b| decode_image(outputs, b, image_size, score_threshold))
        .collect()
}
