//! Run configuration: built-in defaults, then the TOML file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ctxdet_core::corpus::GeneratorConfig;
use ctxdet_core::train::TrainConfig;
use ctxdet_core::{Error, ModelConfig, RunMode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus used by `train` and `eval`, and the training corpus of `ablate`.
    pub data: PathBuf,
    /// Held-out corpus of `ablate`.
    pub test_data: PathBuf,
    /// Output directory of `generate-data`, `train` and `ablate`.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: "data/train".into(),
            test_data: "data/test".into(),
            out: "runs/latest".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub det: usize,
    pub seg: usize,
    pub seed: u64,
    pub split: String,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        GenerateSettings {
            det: 8,
            seg: 8,
            seed: 0,
            split: "train".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub batch_size: usize,
    /// Forbidden-anatomy fraction at which the rule filter drops a box.
    pub filter_threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let o = ctxdet_core::eval::EvalOptions::default();
        EvalSettings {
            score_threshold: o.score_threshold,
            nms_iou: o.nms_iou,
            max_detections: o.max_detections,
            batch_size: o.batch_size,
            filter_threshold: ctxdet_core::eval::DEFAULT_FILTER_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSettings {
    pub seeds: Vec<u64>,
    pub modes: Vec<RunMode>,
}

impl Default for AblateSettings {
    fn default() -> Self {
        AblateSettings {
            seeds: vec![0, 1, 2],
            modes: RunMode::ALL.to_vec(),
        }
    }
}

/// Everything a command needs. `model.input_size` and
/// `model.num_disease_classes` are taken from the corpus at train time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub paths: Paths,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub generate: GenerateSettings,
    pub eval: EvalSettings,
    pub ablate: AblateSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        RunConfig {
            mode: RunMode::JointContext,
            paths: Paths::default(),
            model: ModelConfig::desk(generator.image_size, generator.num_disease_classes),
            train: TrainConfig {
                initial_lr: 0.01,
                ..TrainConfig::default()
            },
            generator,
            generate: GenerateSettings::default(),
            eval: EvalSettings::default(),
            ablate: AblateSettings::default(),
        }
    }
}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Sets the dotted `key` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| config_error(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of a `key=value` override: TOML literal when it
/// parses as one, bare string otherwise.
pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// One flag-level override.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: toml::Value,
}

impl Override {
    pub fn new(key: &str, value: impl Into<toml::Value>) -> Self {
        Override {
            key: key.to_string(),
            value: value.into(),
        }
    }

    /// `section.field=value`
    pub fn parse(spec: &str) -> Result<Self> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| config_error(format!("override {spec:?} is not key=value")))?;
        Ok(Override {
            key: k.trim().to_string(),
            value: parse_value(v.trim()),
        })
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` when given, then with `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[Override]) -> Result<Self> {
        let mut table = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(path, e))
                .with_context(|| format!("reading config {}", path.display()))?;
            let parsed: toml::Table = text
                .parse()
                .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            merge(&mut table, parsed);
        }
        for o in overrides {
            set_path(&mut table, &o.key, o.value.clone())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.generator.validate()?;
        if self.ablate.seeds.is_empty() || self.ablate.modes.is_empty() {
            return Err(config_error("ablate.seeds and ablate.modes must be non-empty"));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.score_threshold) || !(0.0..=1.0).contains(&e.nms_iou) || e.batch_size == 0 {
            return Err(config_error("eval thresholds must lie in [0, 1] and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&e.filter_threshold) {
            return Err(config_error("eval.filter_threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The configuration as TOML; feeding it back through `--config`
    /// reproduces the run.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Relative corpus paths resolve against `root` when one is set. The
    /// output path counts as a corpus path when `out_is_data`.
    pub fn with_data_root(mut self, root: Option<&Path>, out_is_data: bool) -> Self {
        if let Some(root) = root {
            let mut paths = vec![&mut self.paths.data, &mut self.paths.test_data];
            if out_is_data {
                paths.push(&mut self.paths.out);
            }
            for p in paths {
                if p.is_relative() {
                    *p = root.join(&*p);
                }
            }
        }
        self
    }
}
