//! Command-line front end: `train`, `sample`, `eval`, `oracle`, `gen-data`
//! and `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

pub mod config;
mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] ssnn::SsnnError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "ssnn", version, about = "Stochastic sequential neural network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for every random stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn settings(&self) -> Result<Settings, CliError> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            s.apply_text(&text, &path.display().to_string())?;
        }
        for o in &self.overrides {
            s.apply_override(o)?;
        }
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DataKind {
    Pendulum,
    Ssnn,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model; writes model.ckpt and history.jsonl into --out.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Draw sequences (with true paths) from a checkpoint's generative model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Steps per sequence; defaults to `ssnn.steps`.
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a dataset; writes a JSON report and prints a table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; the JSON goes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pendulum state file (`seq_id,t,phi,omega`) for the R² probe.
        #[arg(long)]
        states: Option<PathBuf>,
        /// Fail when a sequence has no true path.
        #[arg(long)]
        require_truth: bool,
        /// Record wall-clock runtime in the report.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Exact log-likelihood and MAP path per sequence, as JSON lines.
    Oracle {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference audit of the ELBO gradients on a tiny random instance.
    Gradcheck {
        #[arg(long = "T", default_value_t = 4)]
        steps: usize,
        #[arg(long = "K", default_value_t = 2)]
        states: usize,
        #[arg(long = "M", default_value_t = 2)]
        max_dur: usize,
        #[arg(long = "m", default_value_t = 2)]
        obs_dim: usize,
        #[arg(long = "h", default_value_t = 3)]
        hidden: usize,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { data, out, common } => {
            let s = common.settings()?;
            commands::train(&s, common.seed, &data, &out)
        }
        Command::Sample {
            checkpoint,
            out,
            steps,
            common,
        } => {
            let s = common.settings()?;
            commands::sample(&s, common.seed, &checkpoint, &out, steps)
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            states,
            require_truth,
            timing,
            common,
        } => {
            let s = common.settings()?;
            let opts = commands::EvalArgs {
                out,
                states,
                require_truth,
                timing,
            };
            commands::eval(&s, common.seed, &checkpoint, &data, &opts)
        }
        Command::Oracle {
            checkpoint,
            data,
            out,
            common,
        } => {
            let s = common.settings()?;
            commands::oracle(&s, &checkpoint, &data, out.as_deref())
        }
        Command::GenData { kind, out, common } => {
            let s = common.settings()?;
            match kind {
                DataKind::Pendulum => commands::gen_pendulum(&s, common.seed, &out),
                DataKind::Ssnn => commands::gen_ssnn(&s, common.seed, &out),
            }
        }
        Command::Gradcheck {
            steps,
            states,
            max_dur,
            obs_dim,
            hidden,
            tau,
            tolerance,
            common,
        } => {
            common.settings()?;
            let g = commands::GradcheckArgs {
                steps,
                states,
                max_dur,
                obs_dim,
                hidden,
                tau,
                tolerance,
            };
            commands::gradcheck(&g, common.seed)
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            let kind = if e.exit_code() == 1 { "usage error" } else { "error" };
            eprintln!("ssnn: {kind}: {e}");
            e.exit_code()
        }
    }
}
