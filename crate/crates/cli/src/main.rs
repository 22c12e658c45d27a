use std::path::PathBuf;
use std::process::ExitCode;

use bullettrain::harness::config::{ExperimentConfig, RunMode};
use bullettrain::harness::experiment::{compare, evaluate_checkpoint, leave_one_out, run_experiment, sweep, LeftOut};
use bullettrain::tensor::Precision;
use bullettrain::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bullettrain", version, about = "Robust training with per-class corruption budgets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean and robust accuracy of a checkpoint on the configured test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One run per value of a config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config key, e.g. `mining.gamma`.
        #[arg(long)]
        key: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Oracle-separated runs with one class starved of generation steps.
    Leaveoneout {
        #[command(flatten)]
        common: Common,
        /// Step counts tried for the two remaining classes.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["boundary", "outlier", "robust"])]
        left_out: Vec<LeftOutArg>,
        #[arg(long, default_value_t = 10)]
        oracle_steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Baseline and mined runs on the same data; reports measured speedup.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML or JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    precision: Option<PrecisionArg>,
    /// Extra `key=value` overrides, applied after the named flags.
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Bullettrain,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LeftOutArg {
    Boundary,
    Outlier,
    Robust,
}

impl Common {
    fn load(&self) -> bullettrain::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Baseline => RunMode::Baseline,
                ModeArg::Bullettrain => RunMode::Bullettrain,
            };
        }
        if let Some(p) = self.precision {
            cfg.precision = match p {
                PrecisionArg::F32 => Precision::F32,
                PrecisionArg::F64 => Precision::F64,
            };
        }
        for s in &self.sets {
            cfg.set(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Usage(_) | Error::Shape(_) => 2,
        Error::Diverged { .. } | Error::Numeric(_) | Error::NonFiniteGradient { .. } => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        Error::Internal(_) => 1,
    }
}

fn print_json<S: serde::Serialize>(value: &S) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => eprintln!("could not render output: {e}"),
    }
}

fn run(cli: Cli) -> bullettrain::Result<()> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = common.load()?;
            print_json(&run_experiment(&cfg, &out)?);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let (clean, robust) = evaluate_checkpoint(&cfg, &checkpoint)?;
            print_json(&serde_json::json!({ "clean_acc": clean, "robust_acc": robust }));
        }
        Command::Sweep { common, key, values, out } => {
            let cfg = common.load()?;
            print_json(&sweep(&cfg, &key, &values, &out)?);
        }
        Command::Leaveoneout { common, values, left_out, oracle_steps, out } => {
            let cfg = common.load()?;
            let classes: Vec<LeftOut> = left_out
                .iter()
                .map(|l| match l {
                    LeftOutArg::Boundary => LeftOut::Boundary,
                    LeftOutArg::Outlier => LeftOut::Outlier,
                    LeftOutArg::Robust => LeftOut::Robust,
                })
                .collect();
            print_json(&leave_one_out(&cfg, &classes, &values, oracle_steps, &out)?);
        }
        Command::Compare { common, out } => {
            if common.seed.is_none() {
                return Err(Error::Config("compare needs an explicit --seed".into()));
            }
            let cfg = common.load()?;
            print_json(&compare(&cfg, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
