use std::path::Path;

use anyhow::{Context, Result};
use ctxdet_core::ablation::{run_ablation, AblationConfig};
use ctxdet_core::checkpoint::Checkpoint;
use ctxdet_core::corpus::{export_dataset, load_corpus, Corpus, DatasetManifest};
use ctxdet_core::eval::{evaluate, pr_curves_csv, DiseaseRuleTable, EvalOptions, EvalTask};
use ctxdet_core::train::{train as run_training, TrainOptions};
use ctxdet_core::{build_model, Error, ModelConfig};

use crate::config::RunConfig;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Logs the effective configuration and, when `dir` is given, saves it there.
fn dump_config(cfg: &RunConfig, dir: Option<&Path>) -> Result<()> {
    let text = cfg.to_toml();
    log::info!("effective configuration:\n{text}");
    if let Some(dir) = dir {
        write_file(&dir.join("effective-config.toml"), &text)?;
    }
    Ok(())
}

fn load_data(dir: &Path) -> Result<(Corpus, DatasetManifest)> {
    if !dir.join(DatasetManifest::FILE_NAME).is_file() {
        return Err(Error::Data(format!("{}: no corpus manifest found", dir.display())).into());
    }
    let loaded = load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    log::info!(
        "corpus {}: {} detection and {} segmentation samples",
        dir.display(),
        loaded.0.detection.len(),
        loaded.0.segmentation.len()
    );
    Ok(loaded)
}

/// The model architecture adapted to the corpus image size and taxonomy.
fn model_for(cfg: &RunConfig, corpus: &Corpus) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    m.input_size = corpus.image_size;
    m.num_disease_classes = corpus.taxonomy.len();
    cfg.mode.configure(&mut m);
    m.validate()?;
    Ok(m)
}

pub fn generate_data(cfg: &RunConfig) -> Result<()> {
    let g = &cfg.generate;
    if g.det == 0 && g.seg == 0 {
        return Err(Error::Config("empty corpus: --det and --seg are both 0".into()).into());
    }
    dump_config(cfg, None)?;
    let out = &cfg.paths.out;
    let manifest = export_dataset(g.det, g.seg, g.seed, &g.split, &cfg.generator, out)?;
    println!(
        "wrote {} detection + {} segmentation samples ({} files) to {}",
        manifest.detection.len(),
        manifest.segmentation.len(),
        manifest.files.len(),
        out.display()
    );
    println!("split {} seed {} config {}", manifest.split, manifest.seed, &manifest.config_hash[..16]);
    println!("manifest {} sha256 {}", out.join(DatasetManifest::FILE_NAME).display(), manifest.hash());
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: Option<&Path>, max_steps: Option<usize>) -> Result<()> {
    let (corpus, _) = load_data(&cfg.paths.data)?;
    if let Some(r) = resume {
        if !r.is_file() {
            return Err(Error::Data(format!("{}: checkpoint not found", r.display())).into());
        }
    }
    let mut cfg = cfg.clone();
    cfg.model = model_for(&cfg, &corpus)?;
    let out = cfg.paths.out.clone();
    dump_config(&cfg, Some(&out))?;
    let options = TrainOptions {
        log_path: Some(out.join("metrics.jsonl")),
        checkpoint_dir: Some(out.join("checkpoints")),
        resume: resume.map(Path::to_path_buf),
        max_steps,
    };
    let outcome = run_training(build_model(&cfg.model)?, &corpus, &cfg.train, cfg.mode, &options)?;
    let last = outcome.log.last();
    println!(
        "trained {} for {} epochs / {} steps, final loss {}",
        cfg.mode,
        outcome.epochs_completed,
        outcome.steps_completed,
        last.map_or("n/a".to_string(), |r| format!("{:.4}", r.total))
    );
    if let Some(p) = outcome.last_checkpoint {
        println!("checkpoint {}", p.display());
    }
    Ok(())
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub task: EvalTask,
    pub filter_rules: Option<&'a Path>,
    pub out: Option<&'a Path>,
    pub pr_curves: Option<&'a Path>,
}

pub fn eval(cfg: &RunConfig, req: &EvalRequest<'_>) -> Result<()> {
    if !req.checkpoint.is_file() {
        return Err(Error::Data(format!("{}: checkpoint not found", req.checkpoint.display())).into());
    }
    let ck = Checkpoint::load(req.checkpoint, None)?;
    let model = ck.restore_model(req.checkpoint)?;
    let (corpus, _) = load_data(&cfg.paths.data)?;
    dump_config(cfg, None)?;
    let e = &cfg.eval;
    let mut options = EvalOptions {
        task: req.task,
        score_threshold: e.score_threshold,
        nms_iou: e.nms_iou,
        max_detections: e.max_detections,
        batch_size: e.batch_size,
        filter: None,
    };
    if let Some(rules) = req.filter_rules {
        let table = DiseaseRuleTable::load(rules, &corpus.taxonomy)?;
        options.filter = Some((table, e.filter_threshold));
    }
    let (report, curves) = evaluate(&model, ck.meta.mode, &corpus, &options)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(out) = req.out {
        write_file(out, &json)?;
    }
    if let Some(path) = req.pr_curves {
        write_file(path, &pr_curves_csv(&curves))?;
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let (train_corpus, _) = load_data(&cfg.paths.data)?;
    let (test_corpus, _) = load_data(&cfg.paths.test_data)?;
    if train_corpus.image_size != test_corpus.image_size || train_corpus.taxonomy.len() != test_corpus.taxonomy.len() {
        return Err(Error::Data("training and test corpora differ in image size or class count".into()).into());
    }
    let mut cfg = cfg.clone();
    cfg.model = model_for(&cfg, &train_corpus)?;
    let out = cfg.paths.out.clone();
    dump_config(&cfg, Some(&out))?;
    let e = &cfg.eval;
    let config = AblationConfig {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seeds: cfg.ablate.seeds.clone(),
        modes: cfg.ablate.modes.clone(),
        eval: EvalOptions {
            task: EvalTask::Auto,
            score_threshold: e.score_threshold,
            nms_iou: e.nms_iou,
            max_detections: e.max_detections,
            batch_size: e.batch_size,
            filter: None,
        },
        output_dir: Some(out.join("runs")),
    };
    let table = run_ablation(&config, &train_corpus, &test_corpus)?;
    write_file(&out.join("ablation.csv"), &table.to_csv())?;
    write_file(&out.join("ablation.json"), &table.to_json())?;
    print!("{}", table.to_csv());
    Ok(())
}
