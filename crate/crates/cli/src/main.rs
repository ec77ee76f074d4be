//! `planet`: synthesis, pre-training, probing and evaluation reports.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! failure. Failures print one JSON line on stderr:
//! `{"error":"data","code":2,"message":"..."}`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use planet_core::encoder::ModelError;
use planet_core::evallab::EvalError;
use planet_core::magdata::DataError;
use planet_core::numerics::NumericsError;
use planet_core::trainer::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn kind(&self) -> (&'static str, u8) {
        match self {
            CliError::Config(_) => ("config", 1),
            CliError::Data(_) => ("data", 2),
            CliError::Numeric(_) => ("numeric", 3),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(NumericsError::NonFinite(_)) => CliError::Numeric(e.to_string()),
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Data(d) => d.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "planet", version, about = "Multimodal graph pre-training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; nothing is written elsewhere.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Flat TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct Inputs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphKind {
    Sbm,
    Synergy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Node,
    Link,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal graph.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "sbm")]
        kind: GraphKind,
    },
    /// Pre-train on one or more graph files.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long = "graph", required = true)]
        graphs: Vec<PathBuf>,
    },
    /// Write frozen node embeddings.
    Embed {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Train a head on frozen embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "node")]
        task: ProbeTask,
    },
    /// N-way K-shot prototype evaluation.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Quantization residuals and token-distribution distances per modality.
    AlignReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Planted XOR synergy: gated against ungated model.
    Synergy {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every parameter gradient on a small graph.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn fail(e: &CliError) -> ExitCode {
    let (kind, code) = e.kind();
    let line = serde_json::json!({ "error": kind, "code": code, "message": e.to_string() });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(std::env::args_os()) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            return fail(&CliError::Config(first));
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}
