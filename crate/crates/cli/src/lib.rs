//! Experiment harness for eqcam: configuration, subcommands and run
//! directories.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod gradcheck;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{Loaded, RunConfig, VERSION};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] eqcam::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Parser)]
#[command(name = "eqcam", version, about = "Weakly supervised multi-modal segmentation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test splits into --out.
    GenData(Common),
    /// Train the weakly supervised networks into the run directory --out.
    Train(Common),
    /// Evaluate the checkpoint --ckpt on a split.
    Eval(Common),
    /// Threshold sweep of the checkpoint --ckpt.
    Sweep(Common),
    /// Baseline plus the four loss-toggle configurations on identical data.
    Ablate(Common),
    /// Finite-difference check of the full objective's gradients.
    GradCheck(Common),
    /// Train the fully supervised upper bound and evaluate it.
    UpperBound(Common),
}

/// Flags shared by every subcommand. Each maps onto a configuration key and
/// overrides both the defaults and `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory holding train.bin, val.bin and test.bin.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint file to evaluate or resume from.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long = "weight-decay", allow_negative_numbers = true)]
    pub weight_decay: Option<f64>,
    #[arg(long = "lambda-kd", allow_negative_numbers = true)]
    pub lambda_kd: Option<f64>,
    #[arg(long = "schedule-T")]
    pub schedule_t: Option<u32>,
    /// Comma list from kd,er,cmer (or none).
    #[arg(long = "loss-toggles")]
    pub loss_toggles: Option<String>,
    /// Comma list from flip,rot90,scale,translate.
    #[arg(long)]
    pub transforms: Option<String>,
    #[arg(long, value_name = "K")]
    pub modalities: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    /// Also write the evaluated maps to eval/cams/.
    #[arg(long = "dump-cams")]
    pub dump_cams: bool,
    /// Any configuration key, as section.key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    /// Flag values as dotted-key overrides, `--set` entries last.
    pub fn overrides(&self) -> Result<Vec<(String, toml::Value)>, CliError> {
        use toml::Value as V;
        let path = |p: &PathBuf| V::String(p.to_string_lossy().into_owned());
        let mut o: Vec<(String, V)> = Vec::new();
        let mut push = |k: &str, v: Option<V>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        push("run.seed", self.seed.map(|s| V::Integer(to_i64(s))));
        push("run.out", self.out.as_ref().map(path));
        push("run.data", self.data.as_ref().map(path));
        push("run.ckpt", self.ckpt.as_ref().map(path));
        push("train.epochs", self.epochs.map(|v| V::Integer(v.into())));
        push("train.batch_size", self.batch_size.map(|v| V::Integer(to_i64(v as u64))));
        push("train.lr", self.lr.map(V::Float));
        push("train.weight_decay", self.weight_decay.map(V::Float));
        push("train.transforms", self.transforms.clone().map(V::String));
        push("loss.lambda_kd", self.lambda_kd.map(V::Float));
        push("loss.schedule_T", self.schedule_t.map(|v| V::Integer(v.into())));
        push("loss.toggles", self.loss_toggles.clone().map(V::String));
        push("data.modalities", self.modalities.map(|v| V::Integer(to_i64(v as u64))));
        push("eval.tau", self.tau.map(V::Float));
        push("eval.dump_cams", self.dump_cams.then_some(V::Boolean(true)));
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            o.push((k.trim().to_string(), config::parse_value(v.trim())));
        }
        Ok(o)
    }

    pub fn load(&self) -> Result<Loaded, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides()?)
    }
}

fn to_i64(v: u64) -> i64 {
    i64::try_from(v).unwrap_or(i64::MAX)
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("eqcam: error: {e}");
            1
        }
    }
}
