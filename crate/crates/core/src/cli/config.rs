use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::CliError;
use crate::data::{specs_for, TaskFamily, TaskSpec};
use crate::diagnostics::SensitivityGrid;
use crate::hpo::{HpoSpace, Sampler, TpeConfig};
use crate::model::LoraConfig;
use crate::prefixnas::{SearchSpace, Strategy};
use crate::trainer::{LrSchedule, OptimizerKind, TrainConfig};

/// Everything a command needs. The top-level `seed` drives every random
/// stream; `train.seed` may only repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub base: BaseSection,
    pub lora: LoraConfig,
    pub search: SearchSpace,
    pub train: TrainConfig,
    pub hpo: HpoSection,
    pub diagnose: DiagnoseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            base: BaseSection::default(),
            lora: LoraConfig::default(),
            search: SearchSpace::default(),
            train: TrainConfig::default(),
            hpo: HpoSection::default(),
            diagnose: DiagnoseSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Collection file written by `gen-data` and read by the other commands.
    pub path: PathBuf,
    pub families: Vec<TaskFamily>,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: PathBuf::from("data/desk.jsonl"),
            families: TaskFamily::ALL.to_vec(),
            vocab_size: 64,
            seq_len: 16,
            train_size: 600,
            val_size: 200,
            test_size: 200,
        }
    }
}

impl DataSection {
    pub fn specs(&self) -> Vec<TaskSpec> {
        specs_for(
            &self.families,
            self.vocab_size,
            self.seq_len,
            (self.train_size, self.val_size, self.test_size),
        )
    }
}

/// Transformer shape; vocabulary, length and heads come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 32,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 64,
        }
    }
}

/// How the frozen base is obtained: pretrained on a separately seeded
/// collection with the same task specs, or left at random init when
/// `pretrain_steps` is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaseSection {
    pub pretrain_steps: usize,
    pub lr: f64,
    pub gamma: f64,
}

impl Default for BaseSection {
    fn default() -> Self {
        BaseSection {
            pretrain_steps: 200,
            lr: 3e-3,
            gamma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HpoSection {
    pub n_trials: usize,
    /// Epoch budget of each inner run.
    pub budget: usize,
    pub sampler: Sampler,
    pub space: HpoSpace,
}

impl Default for HpoSection {
    fn default() -> Self {
        HpoSection {
            n_trials: 100,
            budget: 5,
            sampler: Sampler::Tpe(TpeConfig::default()),
            space: HpoSpace::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSection {
    /// Runs per comparison; seeds are `seed, seed+1, …`.
    pub n_seeds: usize,
    pub strategies: Vec<Strategy>,
    pub grid: SensitivityGrid,
    pub latency: LatencySection,
    pub convergence: ConvergenceSection,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        DiagnoseSection {
            n_seeds: 5,
            strategies: vec![Strategy::Softmax, Strategy::Ste],
            grid: SensitivityGrid {
                n_layers: vec![2, 4, 6],
                block_repetition: vec![1],
                prefix_length: vec![10],
            },
            latency: LatencySection::default(),
            convergence: ConvergenceSection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencySection {
    pub t_forward_ms: f64,
    pub t_switch_ms: f64,
    pub n_tasks: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection {
            t_forward_ms: 11.0,
            t_switch_ms: 2.1,
            n_tasks: 100,
        }
    }
}

/// Plain SGD with `η = c/√T` over a fixed horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceSection {
    pub steps: usize,
    pub c: f64,
    pub gamma: f64,
    /// Running-mean checkpoints are reported every `window` steps.
    pub window: usize,
}

impl Default for ConvergenceSection {
    fn default() -> Self {
        ConvergenceSection {
            steps: 2000,
            c: 5.0,
            gamma: 0.01,
            window: 500,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.train.seed != 0 && self.train.seed != self.seed {
            return bad("train.seed: set the top-level seed instead".into());
        }
        if self.data.families.is_empty() {
            return bad("data.families: at least one task family is required".into());
        }
        let d = &self.data;
        if d.vocab_size == 0 || d.seq_len == 0 || d.train_size == 0 || d.val_size == 0 {
            return bad("data: vocab_size, seq_len, train_size and val_size must be positive".into());
        }
        let m = &self.model;
        if m.d_model == 0 || m.n_heads == 0 || m.n_blocks == 0 || m.d_ff == 0 || m.d_model % m.n_heads != 0 {
            return bad(format!(
                "model: d_model {} must be a positive multiple of n_heads {}",
                m.d_model, m.n_heads
            ));
        }
        if self.base.pretrain_steps > 0 && !(self.base.lr > 0.0 && self.base.gamma > 0.0 && self.base.gamma <= 1.0) {
            return bad("base: lr must be positive and gamma in (0, 1]".into());
        }
        self.lora.validate(m.d_model).map_err(|e| CliError::Config(format!("lora: {e}")))?;
        self.search.validate().map_err(|e| CliError::Config(format!("search: {e}")))?;
        self.train.validate().map_err(|e| CliError::Config(format!("train: {e}")))?;
        self.hpo.space.validate().map_err(|e| CliError::Config(format!("hpo.space: {e}")))?;
        if self.hpo.n_trials == 0 {
            return bad("hpo.n_trials must be at least 1".into());
        }
        if self.diagnose.n_seeds == 0 {
            return bad("diagnose.n_seeds must be at least 1".into());
        }
        let c = &self.diagnose.convergence;
        if c.window == 0 || c.window > c.steps {
            return bad(format!("diagnose.convergence: window {} must lie in [1, steps]", c.window));
        }
        self.convergence_train_config()
            .validate()
            .map_err(|e| CliError::Config(format!("diagnose.convergence: {e}")))?;
        Ok(())
    }

    /// Single-epoch SGD run with `η = c/√steps`, pruning off.
    pub fn convergence_train_config(&self) -> TrainConfig {
        let c = self.diagnose.convergence;
        TrainConfig {
            lr: c.c,
            gamma: c.gamma,
            optimizer: OptimizerKind::Sgd,
            schedule: LrSchedule::InvSqrtT,
            max_epochs: 1,
            steps_per_epoch: c.steps,
            patience: 1,
            prune_factor: 0.0,
            lipschitz_every: c.window.min(100),
            ..self.train_config()
        }
    }

    /// The training config with the top-level seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.diagnose.n_seeds as u64).map(|i| self.seed + i).collect()
    }
}
