//! Optimization schedule and the checkpointed training loop.

mod sampler;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ctxdet_tensor::optim::Sgd;
use ctxdet_tensor::Tensor;
use serde::{Deserialize, Serialize};

pub use sampler::{epoch_rng, sample_mixed_batch, steps_per_epoch, EpochPlan, MixedBatch};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunMode;
use crate::corpus::Corpus;
use crate::loss::{batch_joint_loss_over, LossBreakdown, LossConfig, SampleTarget, SegmentationTarget};
use crate::model::{Branches, Model};
use crate::sce::LabelMask;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub epochs: usize,
    /// Even; half of every batch comes from each task.
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the current batch in normalization running statistics.
    pub bn_momentum: f64,
    pub seed: u64,
    pub schedule: Schedule,
    /// Random horizontal flips of images and labels.
    pub hflip: bool,
    pub loss: LossConfig,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 0.001,
            epochs: 30,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 5e-4,
            bn_momentum: 0.03,
            seed: 0,
            schedule: Schedule::Cosine,
            hflip: false,
            loss: LossConfig::default(),
            checkpoint_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!("batch_size must be even and >= 2, got {}", self.batch_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("momentum must be in [0, 1), weight_decay >= 0, bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `0.5 * lr0 * (1 + cos(pi * t / T))`, with `t` clamped to `T`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_reg: f64,
    pub l_obj: f64,
    pub l_cls: f64,
    pub l_ce: f64,
    pub l_iou: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepRecord {
    fn new(step: usize, epoch: usize, lr: f64, b: &LossBreakdown) -> Self {
        StepRecord {
            step,
            epoch,
            l_reg: b.l_reg,
            l_obj: b.l_obj,
            l_cls: b.l_cls,
            l_ce: b.l_ce,
            l_iou: b.l_iou,
            total: b.total,
            lr,
        }
    }
}

/// Where a run writes and what it resumes from.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// JSON-lines metrics log, appended to when resuming.
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Records of the steps run by this call.
    pub log: Vec<StepRecord>,
    pub epochs_completed: usize,
    pub steps_completed: usize,
    pub last_checkpoint: Option<PathBuf>,
}

/// Model, optimizer state and progress counters.
pub struct Trainer {
    pub model: Model<f32>,
    optimizer: Sgd<f32>,
    config: TrainConfig,
    mode: RunMode,
    epoch: usize,
    step: usize,
}

fn flip_image(img: &[u8], w: usize) -> Vec<u8> {
    img.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

fn flip_mask(m: &LabelMask) -> LabelMask {
    LabelMask::new(m.height, m.width, flip_image(&m.labels, m.width))
}

/// Stacks the batch's images (detection samples first) and their targets.
pub fn assemble_batch(
    corpus: &Corpus,
    batch: &MixedBatch,
    flips: Option<(&[bool], &[bool])>,
    channels: usize,
) -> (Tensor<f32>, Vec<SampleTarget>) {
    let [h, w] = corpus.image_size;
    let plane = h * w;
    let n = batch.len();
    let mut pixels = Vec::with_capacity(n * channels * plane);
    let mut targets = Vec::with_capacity(n);
    let mut push = |img: &[u8]| {
        for _ in 0..channels {
            pixels.extend(img.iter().map(|&v| v as f32 / 255.0));
        }
    };
    for (k, &i) in batch.detection.iter().enumerate() {
        let s = &corpus.detection[i];
        let mut t = s.target.clone();
        if flips.is_some_and(|f| f.0[k]) {
            push(&flip_image(&s.image, w));
            t.boxes = t.boxes.iter().map(|b| b.hflip(w as f64)).collect();
        } else {
            push(&s.image);
        }
        targets.push(SampleTarget::Detection(t));
    }
    for (k, &i) in batch.segmentation.iter().enumerate() {
        let s = &corpus.segmentation[i];
        if flips.is_some_and(|f| f.1[k]) {
            push(&flip_image(&s.image, w));
            targets.push(SampleTarget::Segmentation(SegmentationTarget::new(flip_mask(&s.target.mask))));
        } else {
            push(&s.image);
            targets.push(SampleTarget::Segmentation(s.target.clone()));
        }
    }
    (Tensor::from_vec(&[n, channels, h, w], pixels), targets)
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, mode: RunMode) -> Result<Self> {
        config.validate()?;
        if model.config().context_fusion != mode.uses_context() {
            return Err(Error::Config(format!(
                "mode {mode} needs context_fusion = {}, model has {}",
                mode.uses_context(),
                model.config().context_fusion
            )));
        }
        let optimizer = Sgd::new(config.momentum, config.weight_decay);
        Ok(Trainer {
            model,
            optimizer,
            config,
            mode,
            epoch: 0,
            step: 0,
        })
    }

    /// Restores weights, momentum and progress from a checkpoint.
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        let ck = Checkpoint::load(path, None)?;
        let model = ck.restore_model(path)?;
        let velocity = ck.velocity_for(&model, path)?;
        let mut t = Trainer::new(model, config, ck.meta.mode)?;
        t.optimizer.set_velocity(velocity);
        t.epoch = ck.meta.epoch;
        t.step = ck.meta.step;
        Ok(t)
    }

    pub fn mode(&self) -> RunMode {
        self.mode
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.model,
            CheckpointMeta {
                mode: self.mode,
                epoch: self.epoch,
                step: self.step,
            },
            self.optimizer.velocity(),
        )
    }

    fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let cfg = self.model.config();
        if corpus.image_size != cfg.input_size {
            return Err(Error::Data(format!(
                "corpus images are {:?}, model expects {:?}",
                corpus.image_size, cfg.input_size
            )));
        }
        if corpus.taxonomy.len() != cfg.num_disease_classes {
            return Err(Error::Data(format!(
                "corpus has {} disease classes, model has {}",
                corpus.taxonomy.len(),
                cfg.num_disease_classes
            )));
        }
        let labels = cfg.seg_channels();
        for s in &corpus.detection {
            s.target.validate((corpus.image_size[0], corpus.image_size[1]), cfg.num_disease_classes)?;
        }
        for s in &corpus.segmentation {
            s.target.validate((corpus.image_size[0], corpus.image_size[1]), labels)?;
        }
        Ok(())
    }

    /// Forward, masked joint loss, backward and one SGD update at `lr`.
    /// A non-finite loss leaves the model untouched.
    pub fn train_step(&mut self, pixels: Tensor<f32>, targets: &[SampleTarget], lr: f64) -> Result<LossBreakdown> {
        let branches = Branches {
            detection: targets.iter().any(|t| matches!(t, SampleTarget::Detection(_))),
            segmentation: targets.iter().any(|t| matches!(t, SampleTarget::Segmentation(_))),
        };
        let (breakdown, grads, bn) = {
            let mut g = self.model.graph(true);
            let x = g.input(pixels);
            let fwd = self.model.forward(&mut g, x, branches)?;
            // single-task modes fill half a batch; the absent half counts as masked zeros
            let denominator = self.config.batch_size.max(targets.len());
            let loss = batch_joint_loss_over(&mut g, &fwd, targets, &self.config.loss, denominator)?;
            if !loss.mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    breakdown: loss.mean,
                });
            }
            let grads = g.backward(loss.var);
            (loss.mean, grads, g.take_bn_updates())
        };
        self.model.params.apply_bn_updates(&bn, self.config.bn_momentum);
        self.optimizer.step(&mut self.model.params, &grads, lr);
        Ok(breakdown)
    }

    /// Runs the remaining epochs (or until `max_steps`), logging every step.
    pub fn run(mut self, corpus: &Corpus, options: &TrainOptions) -> Result<TrainOutcome> {
        self.check_corpus(corpus)?;
        let (n_det, n_seg) = (corpus.detection.len(), corpus.segmentation.len());
        let spe = steps_per_epoch(n_det, n_seg, self.config.batch_size);
        let total = spe * self.config.epochs;
        let mut log_file = match &options.log_path {
            Some(p) => {
                if let Some(d) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(self.step > 0)
                    .write(true)
                    .truncate(self.step == 0)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some((BufWriter::new(f), p.clone()))
            }
            None => None,
        };
        let mut write_record = |r: &StepRecord| -> Result<()> {
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::to_string(r)?;
                writeln!(f, "{line}").and_then(|_| f.flush()).map_err(|e| Error::io(p.as_path(), e))?;
            }
            Ok(())
        };
        let mut log = Vec::new();
        let mut last_checkpoint = None;
        let channels = self.model.config().input_channels;
        let max_steps = options.max_steps.unwrap_or(usize::MAX);

        while self.epoch < self.config.epochs && self.step < max_steps {
            let mut rng = epoch_rng(self.config.seed, self.epoch);
            let plan = EpochPlan::new(n_det, n_seg, self.config.batch_size, &mut rng)?;
            let first = self.step - self.epoch * spe;
            for s in first..plan.steps {
                if self.step >= max_steps {
                    break;
                }
                let batch = plan.batch(s, self.mode);
                let flips = plan.flips(s, self.mode);
                let flips = self.config.hflip.then_some((flips.0.as_slice(), flips.1.as_slice()));
                let (pixels, targets) = assemble_batch(corpus, &batch, flips, channels);
                let lr = cosine_lr(self.step, total, self.config.initial_lr);
                let breakdown = match self.train_step(pixels, &targets, lr) {
                    Err(Error::NonFiniteLoss { step, breakdown }) => {
                        write_record(&StepRecord::new(step, self.epoch, lr, &breakdown))?;
                        log::error!("non-finite loss at step {step}: {breakdown:?}");
                        return Err(Error::NonFiniteLoss { step, breakdown });
                    }
                    r => r?,
                };
                let record = StepRecord::new(self.step, self.epoch, lr, &breakdown);
                write_record(&record)?;
                log.push(record);
                self.step += 1;
            }
            if self.step == (self.epoch + 1) * spe {
                self.epoch += 1;
                log::info!(
                    "epoch {}/{} done at step {}, last loss {:.4}",
                    self.epoch,
                    self.config.epochs,
                    self.step,
                    log.last().map_or(f64::NAN, |r| r.total)
                );
                if let Some(dir) = &options.checkpoint_dir {
                    let every = self.config.checkpoint_every;
                    let last = self.epoch == self.config.epochs;
                    if (every > 0 && self.epoch % every == 0) || last {
                        let ck = self.checkpoint();
                        let path = dir.join(format!("epoch-{:04}.ckpt", self.epoch));
                        ck.save(&path)?;
                        ck.save(&dir.join("last.ckpt"))?;
                        last_checkpoint = Some(path);
                    }
                }
            }
        }
        if self.step != self.epoch * spe {
            // stopped by max_steps inside an epoch
            if let Some(dir) = &options.checkpoint_dir {
                let ck = self.checkpoint();
                let path = dir.join(format!("step-{:06}.ckpt", self.step));
                ck.save(&path)?;
                ck.save(&dir.join("last.ckpt"))?;
                last_checkpoint = Some(path);
            }
        }
        Ok(TrainOutcome {
            epochs_completed: self.epoch,
            steps_completed: self.step,
            model: self.model,
            log,
            last_checkpoint,
        })
    }
}

/// Trains `model` on `corpus` in `mode` from scratch, or from
/// `options.resume` when set.
pub fn train(
    model: Model<f32>,
    corpus: &Corpus,
    config: &TrainConfig,
    mode: RunMode,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let trainer = match &options.resume {
        Some(path) => {
            let t = Trainer::resume(path, config.clone())?;
            if t.mode() != mode {
                return Err(Error::Config(format!("checkpoint was trained in mode {}, not {mode}", t.mode())));
            }
            t
        }
        None => Trainer::new(model, config.clone(), mode)?,
    };
    trainer.run(corpus, options)
}

pub fn write_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
