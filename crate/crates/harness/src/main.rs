//! `vtg`: train, evaluate, predict, ablate and plot.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vtg_core::anchor::AnchorMethod;
use vtg_harness::ablate::{ablate, AblateOptions, Grid};
use vtg_harness::checkpoint::Checkpoint;
use vtg_harness::config::RunConfig;
use vtg_harness::dataset::{load_split, load_split_records, Split};
use vtg_harness::evaluate::{evaluate_records, predict_records, read_records, write_report, EvalMode};
use vtg_harness::plot::plot_file;
use vtg_harness::predict::predict_to_file;
use vtg_harness::train::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "vtg", version, about = "Video temporal grounding with gated cross-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Anchor {
    Mean,
    Max,
    Weighted,
    Transformer,
}

impl From<Anchor> for AnchorMethod {
    fn from(a: Anchor) -> Self {
        match a {
            Anchor::Mean => AnchorMethod::Mean,
            Anchor::Max => AnchorMethod::Max,
            Anchor::Weighted => AnchorMethod::Weighted,
            Anchor::Transformer => AnchorMethod::Transformer,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Standard,
    #[value(name = "gate_saliency")]
    GateSaliency,
}

#[derive(Args)]
struct Overrides {
    /// Text anchor generation method.
    #[arg(long, value_enum)]
    anchor: Option<Anchor>,
    /// Dotted-key override, e.g. `--set loss.clip=0.5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn apply(&self, mut cfg: RunConfig) -> anyhow::Result<RunConfig> {
        if let Some(a) = self.anchor {
            cfg.model.anchor = a.into();
        }
        for kv in &self.set {
            let (key, raw) = kv.split_once('=').with_context(|| format!("`{kv}` is not KEY=VALUE"))?;
            cfg = cfg.with_override(key.trim(), parse_value(raw.trim()))?;
        }
        Ok(cfg)
    }
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a per-epoch log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: `train.out_dir` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint on a split, or a prediction file, as JSON.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        ckpt: Option<PathBuf>,
        /// A prediction file with ground truth, evaluated as is.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, value_enum, default_value = "standard")]
        mode: Mode,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write ranked windows and clip saliency for every record of a split.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        /// Suppress windows overlapping a better one above this IoU.
        #[arg(long)]
        nms: Option<f64>,
    },
    /// Train every point of a grid and tabulate validation metrics.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render one SVG per record of a prediction file.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only these query ids (repeatable).
        #[arg(long)]
        qid: Vec<String>,
        #[arg(long, default_value_t = 3)]
        top_k: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            quiet,
            overrides,
        } => {
            let mut cfg = overrides.apply(RunConfig::load(&config)?)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out_dir = out.unwrap_or_else(|| cfg.train.out_dir.clone());
            let train_set = load_split(&cfg, Split::Train, None)?;
            let val_set = match load_split(&cfg, Split::Val, None) {
                Ok(v) => v,
                Err(vtg_harness::HarnessError::Config(m)) if m.contains("is not set") => Vec::new(),
                Err(e) => return Err(e.into()),
            };
            let outcome = train(
                &cfg,
                &train_set,
                &val_set,
                &TrainOptions {
                    out_dir: Some(out_dir.clone()),
                    verbose: !quiet,
                    stop_when: None,
                },
            )?;
            match outcome.best_epoch {
                Some(e) => println!(
                    "best val mAP {:.4} at epoch {e}; checkpoints in {}",
                    outcome.best_map,
                    out_dir.display()
                ),
                None => println!("checkpoints in {}", out_dir.display()),
            }
        }
        Command::Eval {
            ckpt,
            predictions,
            split,
            mode,
            out,
        } => {
            let mode = match mode {
                Mode::Standard => EvalMode::Standard,
                Mode::GateSaliency => EvalMode::GateSaliency,
            };
            let report = match (ckpt, predictions) {
                (Some(path), _) => {
                    let ckpt = Checkpoint::load(&path)?;
                    let (model, store) = ckpt.restore()?;
                    let dims = (ckpt.model.video_dim, ckpt.model.text_dim);
                    let samples = load_split(&ckpt.run, split.parse()?, Some(dims))?;
                    let records = predict_records(&model, &store, &samples, mode, ckpt.run.train.nms_iou)?;
                    evaluate_records(&records, mode)
                }
                (None, Some(path)) => evaluate_records(&read_records(&path)?, mode),
                (None, None) => bail!("one of --ckpt or --predictions is required"),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = out {
                write_report(&path, &report)?;
            }
        }
        Command::Predict { ckpt, out, split, nms } => {
            let ckpt = Checkpoint::load(&ckpt)?;
            let dims = (ckpt.model.video_dim, ckpt.model.text_dim);
            let records = load_split_records(&ckpt.run, split.parse()?, Some(dims))?;
            let summary = predict_to_file(&ckpt, records, &out, nms)?;
            for (qid, msg) in &summary.failures {
                eprintln!("qid {qid}: {msg}");
            }
            println!(
                "wrote {} records to {} ({} failed)",
                summary.written,
                out.display(),
                summary.failures.len()
            );
        }
        Command::Ablate {
            config,
            grid,
            out,
            quiet,
            overrides,
        } => {
            let cfg = overrides.apply(RunConfig::load(&config)?)?;
            let grid = Grid::load(&grid)?;
            let runs = grid.run_count(&cfg)?;
            eprintln!("{runs} runs");
            let table = ablate(
                &cfg,
                &grid,
                &AblateOptions {
                    out_dir: out,
                    verbose: !quiet,
                },
            )?;
            print!("{}", table.to_markdown());
        }
        Command::Plot {
            input,
            out,
            qid,
            top_k,
        } => {
            let summary = plot_file(&input, &out, &qid, top_k)?;
            for (line, msg) in &summary.skipped {
                eprintln!("line {line} skipped: {msg}");
            }
            println!("wrote {} figures to {}", summary.written.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
