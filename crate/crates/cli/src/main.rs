mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctxdet_core::eval::EvalTask;
use ctxdet_core::{Error, RunMode};

use crate::config::{Override, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "ctxdet", version, about = "Context-aware detection with an auxiliary anatomy segmentation")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Arbitrary override `section.field=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Base directory for relative corpus paths.
    #[arg(long, env = "CTXDET_DATA_ROOT", global = true)]
    data_root: Option<PathBuf>,

    /// Force single-threaded execution.
    #[arg(long, global = true)]
    sequential: bool,

    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus (images, masks, annotations, manifest).
    GenerateData(GenerateArgs),
    /// Train one model in one of the four modes.
    Train(TrainArgs),
    /// Score a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Train and score every mode over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    det: Option<usize>,
    #[arg(long)]
    seg: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Square image side in pixels.
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<RunMode>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    hflip: Option<bool>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    task: EvalTask,
    /// JSON map from disease class to allowed anatomy names.
    #[arg(long)]
    filter_rules: Option<PathBuf>,
    /// Write the report here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Precision-recall curves at IoU 0.5 as CSV.
    #[arg(long)]
    pr_curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn push<T: Into<toml::Value>>(out: &mut Vec<Override>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push(Override::new(key, v));
    }
}

fn overrides(cli: &Cli) -> anyhow::Result<Vec<Override>> {
    let mut o: Vec<Override> = cli.set.iter().map(|s| Override::parse(s)).collect::<anyhow::Result<_>>()?;
    match &cli.command {
        Command::GenerateData(a) => {
            push(&mut o, "generate.det", a.det.map(|v| v as i64));
            push(&mut o, "generate.seg", a.seg.map(|v| v as i64));
            push(&mut o, "generate.seed", a.seed.map(|v| v as i64));
            push(&mut o, "generate.split", a.split.clone());
            push(&mut o, "paths.out", a.out.as_deref().map(path_value));
            if let Some(s) = a.image_size {
                o.push(Override::new("generator.image_size", vec![s as i64, s as i64]));
            }
            push(&mut o, "generator.num_disease_classes", a.classes.map(|v| v as i64));
        }
        Command::Train(a) => {
            push(&mut o, "paths.data", a.data.as_deref().map(path_value));
            push(&mut o, "mode", a.mode.map(|m| m.as_str()));
            push(&mut o, "train.epochs", a.epochs.map(|v| v as i64));
            push(&mut o, "train.initial_lr", a.lr);
            push(&mut o, "train.batch_size", a.batch_size.map(|v| v as i64));
            push(&mut o, "train.seed", a.seed.map(|v| v as i64));
            push(&mut o, "train.hflip", a.hflip);
            push(&mut o, "paths.out", a.out.as_deref().map(path_value));
        }
        Command::Eval(a) => {
            push(&mut o, "paths.data", a.data.as_deref().map(path_value));
        }
        Command::Ablate(a) => {
            push(&mut o, "paths.data", a.data.as_deref().map(path_value));
            push(&mut o, "paths.test_data", a.test_data.as_deref().map(path_value));
            if let Some(seeds) = &a.seeds {
                o.push(Override::new("ablate.seeds", seeds.iter().map(|&s| s as i64).collect::<Vec<_>>()));
            }
            push(&mut o, "train.epochs", a.epochs.map(|v| v as i64));
            push(&mut o, "train.initial_lr", a.lr);
            push(&mut o, "paths.out", a.out.as_deref().map(path_value));
        }
    }
    Ok(o)
}

/// 2 for configuration problems, 3 for missing or invalid data, 4 for
/// numerical failures, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFiniteLoss { .. }) => 4,
        Some(
            Error::Data(_)
            | Error::EmptyDataset(_)
            | Error::Target(_)
            | Error::Shape { .. }
            | Error::Checkpoint { .. }
            | Error::Io { .. }
            | Error::Json(_),
        ) => 3,
        None => 1,
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.sequential {
        ctxdet_core::set_parallelism(false);
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides(cli)?)?.with_data_root(
        cli.data_root.as_deref(),
        matches!(cli.command, Command::GenerateData(_)),
    );
    match &cli.command {
        Command::GenerateData(_) => commands::generate_data(&cfg),
        Command::Train(a) => commands::train(&cfg, a.resume.as_deref(), a.max_steps),
        Command::Eval(a) => commands::eval(
            &cfg,
            &commands::EvalRequest {
                checkpoint: &a.checkpoint,
                task: a.task,
                filter_rules: a.filter_rules.as_deref(),
                out: a.out.as_deref(),
                pr_curves: a.pr_curves.as_deref(),
            },
        ),
        Command::Ablate(_) => commands::ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
