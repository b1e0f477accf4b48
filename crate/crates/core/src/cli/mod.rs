//! The `peml` command line: dataset generation, training, architecture
//! search, hyperparameter search, diagnostics and checkpoint inspection.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 refusal (such as
//! an existing output file), 3 numeric failure during a run.

mod commands;
mod config;

pub use config::{
    BaseSection, ConvergenceSection, DataSection, DiagnoseSection, HpoSection, LatencySection, ModelSection, RunConfig,
};

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::data::DataError;
use crate::diagnostics::DiagnosticsError;
use crate::hpo::{HpoError, Sampler, TpeConfig};
use crate::model::ModelError;
use crate::prefixnas::{PrefixError, Strategy};
use crate::trainer::{TrainError, TrainMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("refusing: {0}")]
    Refused(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Runtime(_) => 1,
            CliError::Refused(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Numeric { .. } => CliError::Numeric(e.to_string()),
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<PrefixError> for CliError {
    fn from(e: PrefixError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<HpoError> for CliError {
    fn from(e: HpoError) -> Self {
        match e {
            HpoError::Config(m) => CliError::Config(m),
            HpoError::AllFailed(_) => CliError::Numeric(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<DiagnosticsError> for CliError {
    fn from(e: DiagnosticsError) -> Self {
        match e {
            DiagnosticsError::Train(t) => t.into(),
            DiagnosticsError::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "peml", version, about = "Joint LoRA and prefix-architecture search on a toy transformer")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "PEML_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "PEML_SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task collection.
    GenData {
        /// Destination; defaults to `data.path`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Joint training with architecture search, then merge and export.
    Train(TrainArgs),
    /// Architecture search only, adapters frozen at initialization.
    Search(TrainArgs),
    /// Outer hyperparameter search over full inner runs.
    Hpo(HpoArgs),
    /// Analysis reports.
    Diagnose(DiagnoseArgs),
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Val)]
        split: SplitArg,
    },
    /// Print the architecture stored in a checkpoint.
    ExportArch {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Joint,
    LoraOnly,
    PrefixOnly,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Joint => TrainMode::Joint,
            ModeArg::LoraOnly => TrainMode::LoraOnly,
            ModeArg::PrefixOnly => TrainMode::PrefixOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Softmax,
    Gumbel,
    Ste,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Softmax => Strategy::Softmax,
            StrategyArg::Gumbel => Strategy::Gumbel,
            StrategyArg::Ste => Strategy::Ste,
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    /// Dataset file; defaults to `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Tpe,
    Random,
}

#[derive(Clone, Debug, Default, Args)]
pub struct HpoArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Diagnostic {
    Relaxation,
    Overhead,
    Latency,
    Sensitivity,
    Convergence,
}

#[derive(Clone, Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(value_enum)]
    pub which: Diagnostic,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Forward time per request in milliseconds.
    #[arg(long)]
    pub tf: Option<f64>,
    /// Adapter switch time in milliseconds.
    #[arg(long)]
    pub ts: Option<f64>,
    /// Number of tasks.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
}

/// Loads the config file (or defaults) and applies global overrides.
fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_train_args(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(p) = &a.data {
        cfg.data.path = p.clone();
    }
    if let Some(m) = a.mode {
        cfg.train.mode = m.into();
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.lambda {
        cfg.train.lambda = v;
    }
    if let Some(v) = a.gamma {
        cfg.train.gamma = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.max_epochs = v;
    }
    if let Some(v) = a.prefix_len {
        cfg.train.prefix_len = v;
    }
    if let Some(s) = a.strategy {
        cfg.train.strategy = s.into();
    }
}

fn apply_hpo_args(cfg: &mut RunConfig, a: &HpoArgs) {
    if let Some(p) = &a.data {
        cfg.data.path = p.clone();
    }
    if let Some(n) = a.trials {
        cfg.hpo.n_trials = n;
    }
    if let Some(b) = a.budget {
        cfg.hpo.budget = b;
    }
    match a.sampler {
        Some(SamplerArg::Random) => cfg.hpo.sampler = Sampler::Random,
        Some(SamplerArg::Tpe) if cfg.hpo.sampler == Sampler::Random => cfg.hpo.sampler = Sampler::Tpe(TpeConfig::default()),
        _ => {}
    }
}

fn apply_diagnose_args(cfg: &mut RunConfig, a: &DiagnoseArgs) {
    if let Some(p) = &a.data {
        cfg.data.path = p.clone();
    }
    let lat = &mut cfg.diagnose.latency;
    if let Some(v) = a.tf {
        lat.t_forward_ms = v;
    }
    if let Some(v) = a.ts {
        lat.t_switch_ms = v;
    }
    if let Some(v) = a.n {
        lat.n_tasks = v;
    }
    if let Some(v) = a.seeds {
        cfg.diagnose.n_seeds = v;
    }
}

/// Runs one command; messages go to `out`, the caller maps errors to exit
/// codes.
pub fn execute(cli: &Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::GenData { out: dest, force } => {
            cfg.validate()?;
            commands::gen_data(&cfg, dest.as_deref(), *force, out)
        }
        Command::Train(a) => {
            apply_train_args(&mut cfg, a);
            cfg.validate()?;
            commands::train(&cfg, false, out)
        }
        Command::Search(a) => {
            apply_train_args(&mut cfg, a);
            cfg.validate()?;
            commands::train(&cfg, true, out)
        }
        Command::Hpo(a) => {
            apply_hpo_args(&mut cfg, a);
            cfg.validate()?;
            commands::hpo(&cfg, out)
        }
        Command::Diagnose(a) => {
            apply_diagnose_args(&mut cfg, a);
            cfg.validate()?;
            commands::diagnose(&cfg, a.which, out)
        }
        Command::Eval { checkpoint, split } => {
            cfg.validate()?;
            commands::eval(&cfg, checkpoint, *split, out)
        }
        Command::ExportArch { checkpoint, out: dest } => commands::export_arch(checkpoint, dest.as_deref(), out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests;
