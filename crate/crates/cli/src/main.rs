//! `flat`: generate data, pretrain, fine-tune and evaluate.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data, I/O or
//! checkpoint error, 3 runtime or numeric error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flat_core::{Exec, FlatError, Result};
use serde_json::Value;

use config::{parse_override, Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "flat", version, about = "Few-shot learning with transformation-decoding pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file; command-line values take precedence.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed copied into every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override any config field, e.g. `--set pretrain.lambda=0`.
    #[arg(long = "set", value_name = "FIELD=VALUE")]
    sets: Vec<String>,
    /// Run every loop on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset as PNG folders plus split_spec.json.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain encoder, decoder and base classifier.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Image folder (otherwise the synthetic dataset is used).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from `<out>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Add and train a novel-class head from K examples per class.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint with episodes or on a fixed test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// `episodic` or `setting`.
        #[arg(long)]
        protocol: Option<String>,
        /// `all_classes`, `novel_classes` or `transfer`.
        #[arg(long)]
        setting: Option<String>,
    },
}

fn resolve(common: &Common, extra: Vec<(&str, Option<Value>)>) -> Result<RunConfig> {
    let mut sets = Vec::new();
    for s in &common.sets {
        sets.push(parse_override(s)?);
    }
    for (k, v) in extra {
        if let Some(v) = v {
            sets.push((k.to_string(), v));
        }
    }
    let overrides = Overrides { seed: common.seed, out: common.out.clone(), sets };
    let cfg = RunConfig::resolve(common.config.as_deref(), &overrides)?;
    eprintln!("resolved config: {}", cfg.to_json());
    Ok(cfg)
}

fn path_value(p: &Option<PathBuf>) -> Option<Value> {
    p.as_ref().map(|p| Value::String(p.display().to_string()))
}

fn exec(common: &Common) -> Exec {
    if common.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&resolve(&common, vec![])?),
        Command::Pretrain { common, data, resume } => {
            let cfg = resolve(&common, vec![("data.dir", path_value(&data))])?;
            commands::pretrain(&cfg, resume, exec(&common))
        }
        Command::Finetune { common, data, checkpoint } => {
            let cfg = resolve(&common, vec![("data.dir", path_value(&data)), ("checkpoint", path_value(&checkpoint))])?;
            commands::finetune_cmd(&cfg, exec(&common))
        }
        Command::Evaluate { common, data, checkpoint, protocol, setting } => {
            let cfg = resolve(
                &common,
                vec![
                    ("data.dir", path_value(&data)),
                    ("checkpoint", path_value(&checkpoint)),
                    ("protocol.kind", protocol.map(Value::String)),
                    ("protocol.setting", setting.map(Value::String)),
                ],
            )?;
            commands::evaluate(&cfg, exec(&common)).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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

fn exit_code(e: &FlatError) -> u8 {
    e.exit_code() as u8
}
