use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use sparsenet::harness::config::Prepared;
use sparsenet::harness::{self, records, report, ExperimentConfig, RunRecord};
use sparsenet::{Error, Result};

#[derive(Parser)]
#[command(name = "sparsenet", version, about = "Pruning and anomaly-detection experiments on small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `report.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model and write its checkpoint.
    Train,
    /// Prune with every configured method and sparsity.
    Prune {
        /// Trained dense checkpoint to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// FGSM accuracy and AUC-ROC of a model.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// SensNorm, MSP and GradNorm detection AUC-ROC of a model.
    Detect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// All sweep metrics for one model.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full sweep, writing records.csv plus the report.
    Sweep,
    /// Summaries and plots from a records file.
    Report {
        /// Defaults to `<out>/records.csv`.
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.report.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn write_records(path: &Path, recs: &[RunRecord]) -> Result<()> {
    records::save(path, recs)?;
    emit(json!({ "records": path, "rows": recs.len() }));
    Ok(())
}

type ModelCommand = fn(&ExperimentConfig, &Prepared, &sparsenet::Model, u64) -> Result<Vec<RunRecord>>;

fn per_model(cfg: &ExperimentConfig, name: &str, checkpoint: Option<&Path>, f: ModelCommand) -> Result<()> {
    let data = cfg.data.load()?;
    let out = &cfg.report.out_dir;
    for &seed in &cfg.train.seeds {
        let model = harness::model_for(cfg, &data, seed, checkpoint)?;
        let recs = f(cfg, &data, &model, seed)?;
        write_records(&out.join(format!("{name}_seed{seed}.csv")), &recs)?;
        if checkpoint.is_some() {
            break;
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.report.out_dir.clone();
    match &cli.command {
        Command::Train => {
            for &seed in &cfg.train.seeds {
                let (path, recs) = harness::train_command(&cfg, seed, &out)?;
                emit(json!({ "checkpoint": path, "seed": seed }));
                write_records(&out.join(format!("train_seed{seed}.csv")), &recs)?;
            }
        }
        Command::Prune { checkpoint } => {
            for &seed in &cfg.train.seeds {
                for path in harness::prune_command(&cfg, seed, &out, checkpoint.as_deref())? {
                    emit(json!({ "checkpoint": path, "seed": seed }));
                }
            }
        }
        Command::Attack { checkpoint } => per_model(&cfg, "attack", checkpoint.as_deref(), harness::attack_command)?,
        Command::Detect { checkpoint } => per_model(&cfg, "detect", checkpoint.as_deref(), harness::detect_command)?,
        Command::Eval { checkpoint } => per_model(&cfg, "eval", checkpoint.as_deref(), harness::eval_command)?,
        Command::Sweep => {
            let recs = harness::sweep(&cfg)?;
            write_records(&out.join("records.csv"), &recs)?;
            for path in report::report(&recs, &out)? {
                emit(json!({ "report": path }));
            }
        }
        Command::Report { records: path } => {
            let path = path.clone().unwrap_or_else(|| out.join("records.csv"));
            let recs = records::load(&path)?;
            for p in report::report(&recs, &out)? {
                emit(json!({ "report": p }));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    let category = e.category();
    eprintln!("{}", json!({ "error": { "category": category.to_string(), "message": e.to_string() } }));
    ExitCode::from(category.exit_code() as u8)
}
