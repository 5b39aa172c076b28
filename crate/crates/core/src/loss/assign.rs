//! Positive/negative label assignment on the detection grid.

use ctxdet_tensor::{sigmoid, Scalar};
use serde::{Deserialize, Serialize};

use super::targets::DetectionTarget;
use crate::detection::{box_iou, decode_cell, BBox, SampleHead};

pub const DEFAULT_CENTER_RADIUS: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum AssignStrategy {
    /// Cells whose centers lie within `radius` cells (Chebyshev distance) of a
    /// ground-truth center, on the single level whose nominal object size
    /// (4x stride) is closest to the box size in log scale.
    CenterPrior { radius: f64 },
    /// Dynamic-k assignment: candidates inside the box or the center region on
    /// any level, ranked by classification + IoU cost, `k = floor(sum of the
    /// top-10 candidate IoUs)`.
    SimOta { radius: f64 },
}

impl Default for AssignStrategy {
    fn default() -> Self {
        AssignStrategy::CenterPrior {
            radius: DEFAULT_CENTER_RADIUS,
        }
    }
}

/// Matched ground-truth index per level and cell; `None` marks a negative.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub levels: Vec<Vec<Option<usize>>>,
}

impl Assignment {
    pub fn empty(level_cells: &[usize]) -> Self {
        Assignment {
            levels: level_cells.iter().map(|&n| vec![None; n]).collect(),
        }
    }

    pub fn num_positives(&self) -> usize {
        self.levels.iter().flatten().filter(|m| m.is_some()).count()
    }

    /// `(level, cell, gt index)` for every positive.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.levels.iter().enumerate().flat_map(|(l, cells)| {
            cells
                .iter()
                .enumerate()
                .filter_map(move |(c, m)| m.map(|g| (l, c, g)))
        })
    }
}

/// Level whose nominal object size `4 * stride` is nearest to `sqrt(w * h)`
/// in log scale; ties go to the finer level.
pub fn best_level(bbox: &BBox, strides: &[usize]) -> usize {
    let size = (bbox.width() * bbox.height()).sqrt().max(1e-9).ln();
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (l, &s) in strides.iter().enumerate() {
        let d = (size - (4.0 * s as f64).ln()).abs();
        if d < best_d {
            best = l;
            best_d = d;
        }
    }
    best
}

fn cell_center(cell: usize, width: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    (((cell % width) as f64 + 0.5) * s, ((cell / width) as f64 + 0.5) * s)
}

fn in_center_region(c: (f64, f64), gt: &BBox, stride: usize, radius: f64) -> bool {
    let (gx, gy) = gt.center();
    let r = radius * stride as f64;
    (c.0 - gx).abs() < r && (c.1 - gy).abs() < r
}

fn in_box(c: (f64, f64), gt: &BBox) -> bool {
    c.0 > gt.x1 && c.0 < gt.x2 && c.1 > gt.y1 && c.1 < gt.y2
}

pub fn assign_targets<T: Scalar>(
    sample: &SampleHead<'_, T>,
    target: &DetectionTarget,
    strategy: AssignStrategy,
) -> Assignment {
    let cells: Vec<usize> = sample.levels.iter().map(|l| l.cells()).collect();
    if target.is_empty() {
        return Assignment::empty(&cells);
    }
    match strategy {
        AssignStrategy::CenterPrior { radius } => center_prior(sample, target, radius),
        AssignStrategy::SimOta { radius } => sim_ota(sample, target, radius),
    }
}

fn center_prior<T: Scalar>(sample: &SampleHead<'_, T>, target: &DetectionTarget, radius: f64) -> Assignment {
    let strides: Vec<usize> = sample.levels.iter().map(|l| l.stride).collect();
    let mut out = Assignment::empty(&sample.levels.iter().map(|l| l.cells()).collect::<Vec<_>>());
    let mut best_dist: Vec<Vec<f64>> = out.levels.iter().map(|c| vec![f64::INFINITY; c.len()]).collect();
    for (gi, gt) in target.boxes.iter().enumerate() {
        let l = best_level(gt, &strides);
        let level = &sample.levels[l];
        let (gx, gy) = gt.center();
        for cell in 0..level.cells() {
            let c = cell_center(cell, level.w, level.stride);
            if !in_center_region(c, gt, level.stride, radius) {
                continue;
            }
            let d = (c.0 - gx).hypot(c.1 - gy);
            if d < best_dist[l][cell] {
                best_dist[l][cell] = d;
                out.levels[l][cell] = Some(gi);
            }
        }
    }
    out
}

fn sim_ota<T: Scalar>(sample: &SampleHead<'_, T>, target: &DetectionTarget, radius: f64) -> Assignment {
    const IOU_WEIGHT: f64 = 3.0;
    const OUTSIDE_COST: f64 = 1e5;
    const TOP_K: usize = 10;

    let mut out = Assignment::empty(&sample.levels.iter().map(|l| l.cells()).collect::<Vec<_>>());
    let mut best_cost: Vec<Vec<f64>> = out.levels.iter().map(|c| vec![f64::INFINITY; c.len()]).collect();
    for (gi, gt) in target.boxes.iter().enumerate() {
        let class = target.class_ids[gi];
        // (cost, iou, level, cell)
        let mut cands: Vec<(f64, f64, usize, usize)> = Vec::new();
        for (l, level) in sample.levels.iter().enumerate() {
            for cell in 0..level.cells() {
                let c = cell_center(cell, level.w, level.stride);
                let inb = in_box(c, gt);
                let inc = in_center_region(c, gt, level.stride, radius);
                if !(inb || inc) {
                    continue;
                }
                let reg = level.reg_at(cell).map(|v| v.as_f64());
                let pred = decode_cell(reg, cell / level.w, cell % level.w, level.stride);
                let iou = box_iou(&pred, gt);
                let obj = sigmoid(level.obj[cell].as_f64());
                let mut cls_cost = 0.0;
                for k in 0..level.num_classes {
                    let p = (sigmoid(level.cls_at(k, cell).as_f64()) * obj).sqrt().clamp(1e-7, 1.0 - 1e-7);
                    cls_cost -= if k == class { p.ln() } else { (1.0 - p).ln() };
                }
                let mut cost = cls_cost + IOU_WEIGHT * -(iou + 1e-8).ln();
                if !(inb && inc) {
                    cost += OUTSIDE_COST;
                }
                cands.push((cost, iou, l, cell));
            }
        }
        if cands.is_empty() {
            continue;
        }
        let mut ious: Vec<f64> = cands.iter().map(|c| c.1).collect();
        ious.sort_by(|a, b| b.total_cmp(a));
        let k = (ious.iter().take(TOP_K).sum::<f64>().floor() as usize).clamp(1, cands.len());
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
        for &(cost, _, l, cell) in cands.iter().take(k) {
            if cost < best_cost[l][cell] {
                best_cost[l][cell] = cost;
                out.levels[l][cell] = Some(gi);
            }
        }
    }
    out
}
