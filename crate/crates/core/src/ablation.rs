//! The four-mode ablation grid: every mode trained with the same seeds and
//! scored on the same held-out corpus.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunMode};
use crate::corpus::Corpus;
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::model::build_model;
use crate::train::{train, TrainConfig, TrainOptions};
use crate::Result;

pub const METRIC_COLUMNS: [&str; 6] = ["ap50", "ap75", "ap5095", "miou", "mdice", "macc"];

/// Six metrics of one run or one mode; `None` where the mode has no such task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap5095: Option<f64>,
    pub miou: Option<f64>,
    pub mdice: Option<f64>,
    pub macc: Option<f64>,
}

impl MetricRow {
    pub fn from_report(report: &EvalReport) -> Self {
        let d = report.detection.as_ref();
        let s = report.segmentation.as_ref();
        MetricRow {
            ap50: d.map(|r| r.ap50),
            ap75: d.map(|r| r.ap75),
            ap5095: d.map(|r| r.ap5095),
            miou: s.map(|r| r.miou),
            mdice: s.map(|r| r.mdice),
            macc: s.map(|r| r.macc),
        }
    }

    pub fn values(&self) -> [Option<f64>; 6] {
        [self.ap50, self.ap75, self.ap5095, self.miou, self.mdice, self.macc]
    }

    fn from_values(v: [Option<f64>; 6]) -> Self {
        MetricRow {
            ap50: v[0],
            ap75: v[1],
            ap5095: v[2],
            miou: v[3],
            mdice: v[4],
            macc: v[5],
        }
    }
}

/// Median of the finite values; the mean of the two middle ones for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: RunMode,
    pub seed: u64,
    pub steps: usize,
    pub final_loss: f64,
    pub metrics: MetricRow,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: RunMode,
    /// Per-metric median over seeds.
    pub median: MetricRow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

impl AblationTable {
    pub fn row(&self, mode: RunMode) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.mode == mode).map(|r| &r.median)
    }

    /// `mode,ap50,...,macc` with empty cells for untrained tasks.
    pub fn to_csv(&self) -> String {
        let mut out = format!("mode,{}\n", METRIC_COLUMNS.join(","));
        for row in &self.rows {
            out.push_str(row.mode.as_str());
            for v in row.median.values() {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&format!("{v:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

#[derive(Clone, Debug)]
pub struct AblationConfig {
    /// Mode-independent architecture; each run applies its mode and seed.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub modes: Vec<RunMode>,
    pub eval: EvalOptions,
    /// Per-run metric logs and final checkpoints go under `<dir>/<mode>/seed-<n>/`.
    pub output_dir: Option<PathBuf>,
}

/// Trains and evaluates every (mode, seed) pair in order.
pub fn run_ablation(config: &AblationConfig, train_corpus: &Corpus, test_corpus: &Corpus) -> Result<AblationTable> {
    let mut runs = Vec::new();
    for &mode in &config.modes {
        for &seed in &config.seeds {
            let mut mc = config.model.clone();
            mc.seed = seed;
            mode.configure(&mut mc);
            let tc = TrainConfig {
                seed,
                ..config.train.clone()
            };
            let options = match &config.output_dir {
                Some(dir) => {
                    let d = dir.join(mode.as_str()).join(format!("seed-{seed}"));
                    TrainOptions {
                        log_path: Some(d.join("metrics.jsonl")),
                        checkpoint_dir: Some(d),
                        ..TrainOptions::default()
                    }
                }
                None => TrainOptions::default(),
            };
            let started = std::time::Instant::now();
            let out = train(build_model(&mc)?, train_corpus, &tc, mode, &options)?;
            let (report, _) = evaluate(&out.model, mode, test_corpus, &config.eval)?;
            let run = AblationRun {
                mode,
                seed,
                steps: out.steps_completed,
                final_loss: out.log.last().map_or(f64::NAN, |r| r.total),
                metrics: MetricRow::from_report(&report),
                seconds: started.elapsed().as_secs_f64(),
            };
            log::info!("ablation {mode} seed {seed}: {:?} in {:.0}s", run.metrics, run.seconds);
            runs.push(run);
        }
    }
    let rows = config
        .modes
        .iter()
        .map(|&mode| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
            let values = std::array::from_fn(|k| {
                let v: Vec<f64> = mine.iter().filter_map(|r| r.metrics.values()[k]).collect();
                median(&v)
            });
            AblationRow {
                mode,
                median: MetricRow::from_values(values),
            }
        })
        .collect();
    Ok(AblationTable {
        seeds: config.seeds.clone(),
        rows,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even_and_nan() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[f64::NAN]), None);
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn csv_leaves_untrained_cells_blank() {
        let table = AblationTable {
            seeds: vec![0],
            rows: vec![AblationRow {
                mode: RunMode::DetOnly,
                median: MetricRow {
                    ap50: Some(0.5),
                    ap75: Some(0.25),
                    ap5095: Some(0.2),
                    ..MetricRow::default()
                },
            }],
            runs: vec![],
        };
        let csv = table.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap(), "det-only,0.500000,0.250000,0.200000,,,");
    }
}
