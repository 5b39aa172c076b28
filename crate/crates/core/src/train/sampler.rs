//! Mixed-task batch sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunMode;
use crate::{Error, Result};

/// Sample indices of one step: half from each task in joint modes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MixedBatch {
    pub detection: Vec<usize>,
    pub segmentation: Vec<usize>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.detection.len() + self.segmentation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_sizes(n_detection: usize, n_segmentation: usize, batch_size: usize) -> Result<()> {
    if batch_size < 2 || batch_size % 2 != 0 {
        return Err(Error::Config(format!("batch_size must be even and >= 2, got {batch_size}")));
    }
    if n_detection == 0 {
        return Err(Error::EmptyDataset("detection"));
    }
    if n_segmentation == 0 {
        return Err(Error::EmptyDataset("segmentation"));
    }
    Ok(())
}

/// `k` indices from `0..n`, distinct when `k <= n`.
fn draw<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k <= n {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// One stand-alone batch: `batch_size / 2` samples from each dataset.
pub fn sample_mixed_batch<R: Rng>(
    n_detection: usize,
    n_segmentation: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<MixedBatch> {
    check_sizes(n_detection, n_segmentation, batch_size)?;
    let half = batch_size / 2;
    Ok(MixedBatch {
        detection: draw(rng, n_detection, half),
        segmentation: draw(rng, n_segmentation, half),
    })
}

/// Steps in one epoch: one pass over the larger dataset at `batch_size / 2`
/// samples per task and step.
pub fn steps_per_epoch(n_detection: usize, n_segmentation: usize, batch_size: usize) -> usize {
    n_detection.max(n_segmentation).div_ceil((batch_size / 2).max(1))
}

/// Generator of epoch `epoch`; independent of every other epoch so a resumed
/// run needs no saved generator state.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Per-task index streams of one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub steps: usize,
    pub per_task: usize,
    pub detection: Vec<usize>,
    pub segmentation: Vec<usize>,
    /// Horizontal-flip draws aligned with the streams, used when augmentation is on.
    pub detection_flips: Vec<bool>,
    pub segmentation_flips: Vec<bool>,
}

/// The stream of `n` samples with `len` entries: a permutation padded by
/// draws with replacement for the larger dataset, draws with replacement
/// throughout for the smaller one.
fn stream<R: Rng>(rng: &mut R, n: usize, len: usize, larger: bool) -> Vec<usize> {
    if larger {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        v.truncate(len);
        while v.len() < len {
            v.push(rng.random_range(0..n));
        }
        v
    } else {
        (0..len).map(|_| rng.random_range(0..n)).collect()
    }
}

impl EpochPlan {
    /// Both task streams are drawn in every mode so that all modes see the
    /// same samples; single-task modes simply ignore the other stream.
    pub fn new<R: Rng>(n_detection: usize, n_segmentation: usize, batch_size: usize, rng: &mut R) -> Result<Self> {
        check_sizes(n_detection, n_segmentation, batch_size)?;
        let per_task = batch_size / 2;
        let steps = steps_per_epoch(n_detection, n_segmentation, batch_size);
        let len = steps * per_task;
        let det_larger = n_detection >= n_segmentation;
        let seg_larger = n_segmentation >= n_detection;
        let detection = stream(rng, n_detection, len, det_larger);
        let segmentation = stream(rng, n_segmentation, len, seg_larger);
        let detection_flips = (0..len).map(|_| rng.random_bool(0.5)).collect();
        let segmentation_flips = (0..len).map(|_| rng.random_bool(0.5)).collect();
        Ok(EpochPlan {
            steps,
            per_task,
            detection,
            segmentation,
            detection_flips,
            segmentation_flips,
        })
    }

    /// Flip draws of the batch returned by [`EpochPlan::batch`] for the same step.
    pub fn flips(&self, step: usize, mode: RunMode) -> (Vec<bool>, Vec<bool>) {
        let r = step * self.per_task..(step + 1) * self.per_task;
        (
            if mode.trains_detection() { self.detection_flips[r.clone()].to_vec() } else { Vec::new() },
            if mode.trains_segmentation() { self.segmentation_flips[r].to_vec() } else { Vec::new() },
        )
    }

    pub fn batch(&self, step: usize, mode: RunMode) -> MixedBatch {
        let r = step * self.per_task..(step + 1) * self.per_task;
        MixedBatch {
            detection: if mode.trains_detection() {
                self.detection[r.clone()].to_vec()
            } else {
                Vec::new()
            },
            segmentation: if mode.trains_segmentation() {
                self.segmentation[r].to_vec()
            } else {
                Vec::new()
            },
        }
    }
}
