//! Scalar-loop reference implementations and random fixtures shared by the
//! oracle and acceptance suites. Nothing here reuses library internals beyond
//! plain data types.
#![allow(dead_code)]

use ctxdet_core::detection::{BBox, Detection, HeadOutputs, LevelOutputs};
use ctxdet_core::loss::{Assignment, DetectionTarget};
use ctxdet_core::sce::LabelMask;
use ctxdet_core::ModelConfig;
use ctxdet_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r.x2 - r.x1) * (r.y2 - r.y1);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, size: f64) -> BBox {
    let w = rng.random_range(2.0..size / 2.0);
    let h = rng.random_range(2.0..size / 2.0);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BBox::new(x, y, x + w, y + h)
}

/// Up to three images with up to five ground-truth boxes each, and
/// predictions that are jittered copies of them plus random clutter.
pub fn micro_case(rng: &mut ChaCha8Rng, classes: usize) -> (Vec<Vec<Detection>>, Vec<DetectionTarget>) {
    let images = rng.random_range(1..=3);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let n = rng.random_range(0..=5);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(rng, 64.0)).collect();
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let mut dets = Vec::new();
        for (b, &c) in boxes.iter().zip(&ids) {
            for _ in 0..rng.random_range(0..3) {
                let j = rng.random_range(0.0..4.0);
                let bb = BBox::new(
                    b.x1 + rng.random_range(-j..=j),
                    b.y1 + rng.random_range(-j..=j),
                    b.x2 + rng.random_range(-j..=j),
                    b.y2 + rng.random_range(-j..=j),
                );
                if bb.is_valid() {
                    let class_id = if rng.random_bool(0.8) { c } else { rng.random_range(0..classes) };
                    dets.push(Detection {
                        bbox: bb,
                        class_id,
                        score: rng.random_range(0.0..1.0),
                    });
                }
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            dets.push(Detection {
                bbox: random_box(rng, 64.0),
                class_id: rng.random_range(0..classes),
                score: rng.random_range(0.0..1.0),
            });
        }
        preds.push(dets);
        gts.push(DetectionTarget::new(boxes, ids));
    }
    (preds, gts)
}

/// Precision and recall after the top `n` predictions, recomputed from
/// scratch for every `n`, then interpolated at 101 recall levels.
pub fn brute_force_class_ap(preds: &[Vec<Detection>], gts: &[DetectionTarget], class: usize, thr: f64) -> f64 {
    let mut all: Vec<(usize, Detection)> = Vec::new();
    for (i, ds) in preds.iter().enumerate() {
        for d in ds.iter().filter(|d| d.class_id == class) {
            all.push((i, *d));
        }
    }
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let total_gt: usize = gts.iter().map(|g| g.class_ids.iter().filter(|&&c| c == class).count()).sum();
    let mut points = Vec::new();
    for n in 1..=all.len() {
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
        let mut tp = 0;
        for (img, det) in &all[..n] {
            let mut best = None;
            let mut best_iou = thr;
            for (j, b) in gts[*img].boxes.iter().enumerate() {
                if gts[*img].class_ids[j] != class || taken[*img][j] {
                    continue;
                }
                let v = iou(&det.bbox, b);
                if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                    best = Some(j);
                    best_iou = v;
                }
            }
            if let Some(j) = best {
                taken[*img][j] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / n as f64));
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let p = points
            .iter()
            .filter(|(rec, _)| *rec >= level)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += p;
    }
    sum / 101.0
}

/// Mean over classes that have ground truth.
pub fn brute_force_map(preds: &[Vec<Detection>], gts: &[DetectionTarget], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().flat_map(|g| g.class_ids.clone()).collect();
    classes.sort();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    classes.iter().map(|&c| brute_force_class_ap(preds, gts, c, thr)).sum::<f64>() / classes.len() as f64
}

/// `(miou, mdice, macc)` from per-class pixel counts.
pub fn naive_seg_metrics(preds: &[LabelMask], gts: &[LabelMask], k: usize) -> (f64, f64, f64) {
    let (mut iou, mut dice, mut acc, mut n) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..k as u8 {
        let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
        for (p, g) in preds.iter().zip(gts) {
            for y in 0..g.height {
                for x in 0..g.width {
                    let (a, b) = (p.get(y, x), g.get(y, x));
                    if a == c && b == c {
                        tp += 1;
                    } else if a == c {
                        fp += 1;
                    } else if b == c {
                        fneg += 1;
                    }
                }
            }
        }
        if tp + fneg == 0 {
            continue;
        }
        iou += tp as f64 / (tp + fp + fneg) as f64;
        dice += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        acc += tp as f64 / (tp + fneg) as f64;
        n += 1.0;
    }
    (iou / n, dice / n, acc / n)
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize) -> LabelMask {
    // blocky labels so that some classes are absent now and then
    let bs = 4;
    let grid: Vec<u8> = (0..h.div_ceil(bs) * w.div_ceil(bs)).map(|_| rng.random_range(0..k as u8)).collect();
    let labels = (0..h * w)
        .map(|i| grid[(i / w / bs) * w.div_ceil(bs) + (i % w) / bs])
        .collect();
    LabelMask::new(h, w, labels)
}

fn bce(z: f64, t: f64) -> f64 {
    let p = 1.0 / (1.0 + (-z).exp());
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}

/// `(l_reg, l_obj, l_cls)` of batch item `b` under a fixed assignment.
pub fn naive_detection_loss(
    head: &HeadOutputs<f64>,
    b: usize,
    target: &DetectionTarget,
    assignment: &Assignment,
) -> (f64, f64, f64) {
    let npos = assignment.levels.iter().flatten().filter(|m| m.is_some()).count();
    let (mut reg, mut obj, mut cls) = (0.0, 0.0, 0.0);
    for (l, level) in head.levels.iter().enumerate() {
        let s = level.stride as f64;
        let shape = level.class_logits.shape();
        let (c, h, w) = (shape[1], shape[2], shape[3]);
        let at = |t: &Tensor<f64>, ch: usize, y: usize, x: usize| {
            let sh = t.shape();
            t.data()[((b * sh[1] + ch) * sh[2] + y) * sh[3] + x]
        };
        for y in 0..h {
            for x in 0..w {
                let m = assignment.levels[l][y * w + x];
                obj += bce(at(&level.objectness_logits, 0, y, x), if m.is_some() { 1.0 } else { 0.0 });
                if let Some(g) = m {
                    for k in 0..c {
                        cls += bce(at(&level.class_logits, k, y, x), if k == target.class_ids[g] { 1.0 } else { 0.0 });
                    }
                    let cx = (x as f64 + at(&level.box_regression, 0, y, x)) * s;
                    let cy = (y as f64 + at(&level.box_regression, 1, y, x)) * s;
                    let bw = at(&level.box_regression, 2, y, x).exp() * s;
                    let bh = at(&level.box_regression, 3, y, x).exp() * s;
                    let pred = BBox::new(cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0);
                    reg += 1.0 - iou(&pred, &target.boxes[g]);
                }
            }
        }
    }
    if npos == 0 {
        (0.0, obj, 0.0)
    } else {
        (reg / npos as f64, obj / npos as f64, cls / npos as f64)
    }
}

/// `(l_ce, l_iou)` of `k x H x W` logits at mask resolution, soft Jaccard.
pub fn naive_segmentation_loss(logits: &[f64], k: usize, mask: &LabelMask) -> (f64, f64) {
    let n = mask.height * mask.width;
    let mut ce = 0.0;
    let mut probs = vec![vec![0.0; n]; k];
    for p in 0..n {
        let z: f64 = (0..k).map(|c| logits[c * n + p].exp()).sum();
        for c in 0..k {
            probs[c][p] = logits[c * n + p].exp() / z;
        }
        ce -= probs[mask.labels[p] as usize][p].ln();
    }
    let mut score = 0.0;
    let mut counted = 0.0;
    for c in 0..k {
        let target: Vec<f64> = mask.labels.iter().map(|&l| if l as usize == c { 1.0 } else { 0.0 }).collect();
        let inter: f64 = (0..n).map(|p| probs[c][p] * target[p]).sum();
        let pm: f64 = probs[c].iter().sum();
        let tm: f64 = target.iter().sum();
        if tm == 0.0 && pm < 0.5 {
            continue;
        }
        score += inter / (pm + tm - inter);
        counted += 1.0;
    }
    (ce / n as f64, 1.0 - score / counted)
}

/// Random head outputs for a `size x size` image with `classes` classes.
pub fn random_head(rng: &mut ChaCha8Rng, batch: usize, classes: usize, size: usize) -> HeadOutputs<f64> {
    let mut t = |shape: &[usize], lo: f64, hi: f64| {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
    };
    HeadOutputs {
        levels: [8usize, 16, 32]
            .iter()
            .map(|&s| {
                let g = size / s;
                LevelOutputs {
                    stride: s,
                    class_logits: t(&[batch, classes, g, g], -4.0, 4.0),
                    box_regression: t(&[batch, 4, g, g], -0.8, 1.2),
                    objectness_logits: t(&[batch, 1, g, g], -4.0, 4.0),
                }
            })
            .collect(),
    }
}

/// A model small enough for exhaustive finite differences.
pub fn micro_config(context: bool) -> ModelConfig {
    ModelConfig {
        num_disease_classes: 2,
        num_anatomy_classes: 2,
        input_size: [32, 32],
        // equal widths keep the topology but cap the parameter count below 1k
        pyramid_channels: vec![256, 256, 256],
        head_channels: 256,
        width_multiplier: 1.0 / 128.0,
        depth_multiplier: 0.3,
        head_depth: 1,
        context_fusion: context,
        seed: 3,
        ..ModelConfig::default()
    }
}

/// Small model used by the routing and masking checks.
pub fn tiny_config(context: bool) -> ModelConfig {
    ModelConfig {
        num_disease_classes: 6,
        input_size: [64, 64],
        width_multiplier: 0.0625,
        depth_multiplier: 0.33,
        head_depth: 1,
        context_fusion: context,
        seed: 5,
        ..ModelConfig::default()
    }
}
