//! `pixar`: dataset building, both pretraining stages, generation,
//! evaluation, attacks and attention heatmaps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric abort. Failures print one `error kind=... msg="..."` line on
//! stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Failure;
use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "pixar", version, about = "Pixel-based autoregressive language modelling")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Config file (`key = value`, `[section]` headers, `#` comments).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for checkpoints, metrics and reports.
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Split text files into training samples, one per output line.
    Segment {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Segment, render and pack text files into a dataset file.
    BuildDataset {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Stage-1 teacher-forced pretraining; resumes from `<out-dir>/stage1.ckpt`.
    Pretrain1 {
        #[arg(long)]
        dataset: PathBuf,
        /// Total optimizer steps (`train.steps`).
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint and exit after this step; a later run resumes.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Stage-2 adversarial training from a stage-1 checkpoint; resumes from
    /// `<out-dir>/stage2.ckpt`.
    Pretrain2 {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        lambda_m: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint and exit after this step; a later run resumes.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Greedy generation from a text prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Generation steps, each adding `L` patches.
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Last-word (`--shots 0`) or few-shot evaluation on a TSV task file.
    EvalGen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        shots: Option<usize>,
        /// Word list for readability; defaults to the built-in list.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Finetune a classification head on the EOS hidden state.
    EvalCls {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        regression: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train only the head.
        #[arg(long)]
        freeze: bool,
    },
    /// Evaluate a generation task under increasing letter-substitution attacks.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
        /// Comma-separated ascending ratios.
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<f64>,
        #[arg(long)]
        shots: Option<usize>,
        /// Confusables table; defaults to the built-in one.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Export attention heatmaps for the first generated position.
    Attn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// `all`, `last`, `mean` or a layer index.
        #[arg(long, default_value = "all")]
        layers: String,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for pair in &common.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = resolve_config(&cli.common)?;
    let out = cli.common.out_dir.as_path();
    match cli.command {
        Command::Segment { input, output } => commands::segment(&cfg, &input, &output),
        Command::BuildDataset { input, output } => commands::build_dataset(&cfg, &input, &output),
        Command::Pretrain1 { dataset, steps, stop_after } => {
            if let Some(s) = steps {
                cfg.set("train.steps", &s.to_string())?;
            }
            commands::pretrain1(&cfg, &dataset, stop_after, out)
        }
        Command::Pretrain2 {
            checkpoint,
            dataset,
            lambda_m,
            steps,
            stop_after,
        } => {
            if let Some(l) = lambda_m {
                cfg.set("stage2.lambda_m", &l.to_string())?;
            }
            if let Some(s) = steps {
                cfg.set("stage2.steps", &s.to_string())?;
            }
            commands::pretrain2(&cfg, &checkpoint, &dataset, stop_after, out)
        }
        Command::Generate { checkpoint, prompt, steps } => commands::generate(&cfg, &checkpoint, &prompt, steps, out),
        Command::EvalGen {
            checkpoint,
            task,
            shots,
            vocab,
        } => {
            if let Some(k) = shots {
                cfg.set("eval.shots", &k.to_string())?;
            }
            commands::eval_gen(&cfg, &checkpoint, &task, vocab.as_deref(), out)
        }
        Command::EvalCls {
            checkpoint,
            train,
            val,
            regression,
            epochs,
            freeze,
        } => {
            if let Some(e) = epochs {
                cfg.set("cls.epochs", &e.to_string())?;
            }
            if freeze {
                cfg.set("cls.freeze_backbone", "true")?;
            }
            commands::eval_cls(&cfg, &checkpoint, &train, &val, regression, out)
        }
        Command::Attack {
            checkpoint,
            task,
            ratios,
            shots,
            table,
            vocab,
        } => {
            if let Some(k) = shots {
                cfg.set("eval.shots", &k.to_string())?;
            }
            commands::attack(&cfg, &checkpoint, &task, &ratios, table.as_deref(), vocab.as_deref(), out)
        }
        Command::Attn { checkpoint, prompt, layers } => commands::attn(&cfg, &checkpoint, &prompt, &layers, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.diagnostic());
            ExitCode::from(f.exit_code())
        }
    }
}
