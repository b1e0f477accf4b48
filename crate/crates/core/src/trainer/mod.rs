//! Joint training of LoRA adapters, the prefix generator and architecture
//! parameters over multi-task mini-batches.
//!
//! One step runs a single forward/backward pass and updates every trainable
//! group from gradients taken at the same parameter point. The base model
//! stays frozen throughout.

mod batch;
mod convergence;
mod optim;
mod pretrain;
mod run;
mod step;

pub use batch::{batch_sizes, build_batch, MultiTaskBatch, TaskBatch};
pub use convergence::{convergence_metrics, ConvergenceCurve};
pub use optim::{OptimizerKind, OptimizerState};
pub use pretrain::{pretrain_base, PretrainConfig};
pub use run::{
    discretization_gap, evaluate, evaluate_merged, evaluate_state, finish_search, model_config_for, run_search, train_loop,
    write_history_csv, DiscretizationGap, EpochReport, SearchLog, StopTracker, TrainOutcome,
};
pub use step::{joint_gradient_error, joint_loss, train_step, train_step_with, LossParts, StepReport, TrainState, UpdateSet};

pub use crate::prefixnas::project_simplex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::model::ModelError;
use crate::prefixnas::{Parameterization, PrefixError, Strategy};

/// Which components train. The ablations drop the other component
/// entirely: no prefix for `LoraOnly`, no adapters for `PrefixOnly`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Joint,
    LoraOnly,
    PrefixOnly,
}

impl TrainMode {
    pub fn uses_lora(self) -> bool {
        self != TrainMode::PrefixOnly
    }

    pub fn uses_prefix(self) -> bool {
        self != TrainMode::LoraOnly
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::LoraOnly => "lora-only",
            TrainMode::PrefixOnly => "prefix-only",
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [TrainMode::Joint, TrainMode::LoraOnly, TrainMode::PrefixOnly]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown mode {s:?}; expected joint, lora-only or prefix-only")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `η = lr / √T` for a run of `T` planned steps; `lr` plays the role of
    /// the constant `c` and only `η` is bounded.
    InvSqrtT,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub max_epochs: usize,
    /// Steps per epoch; `0` means `round(1/γ)` so an epoch sees each
    /// training example about once.
    pub steps_per_epoch: usize,
    pub patience: usize,
    pub strategy: Strategy,
    pub temperature: f64,
    pub parameterization: Parameterization,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub grad_clip: Option<f64>,
    pub mode: TrainMode,
    /// Update after each task's loss instead of once per joint step.
    pub per_task_updates: bool,
    /// Pruning threshold as a fraction of `1/k`; `0` disables pruning.
    pub prune_factor: f64,
    pub prefix_len: usize,
    /// Estimate the cross-Lipschitz ratio every this many steps (`0` = off).
    pub lipschitz_every: usize,
    /// Keep the adapters at their initial values (architecture search only).
    pub freeze_lora: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-3,
            gamma: 0.1,
            lambda: 0.01,
            max_epochs: 30,
            steps_per_epoch: 0,
            patience: 25,
            strategy: Strategy::Softmax,
            temperature: 1.0,
            parameterization: Parameterization::Softmax,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Constant,
            grad_clip: None,
            mode: TrainMode::Joint,
            per_task_updates: false,
            prune_factor: 0.2,
            prefix_len: 10,
            lipschitz_every: 0,
            freeze_lora: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        let eta = self.step_lr(self.planned_steps());
        if !(eta == 0.0 || (1e-5..=1.0).contains(&eta)) {
            return bad(format!("step size {eta} outside [1e-5, 1]"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be nonnegative", self.lambda));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.strategy == Strategy::Gumbel && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.parameterization == Parameterization::Simplex && self.strategy != Strategy::Softmax {
            return bad(format!("strategy {} needs softmax parameterization", self.strategy.name()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.prune_factor) {
            return bad(format!("prune_factor {} outside [0, 1)", self.prune_factor));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            ((1.0 / self.gamma).round() as usize).max(1)
        }
    }

    pub fn planned_steps(&self) -> usize {
        self.max_epochs * self.steps_per_epoch()
    }

    /// Step size for a run of `total_steps`.
    pub fn step_lr(&self, total_steps: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::InvSqrtT => self.lr / (total_steps.max(1) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("non-finite value at step {step}: {detail}")]
    Numeric { step: u64, detail: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prefix(#[from] PrefixError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e.to_string())
    }
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(ModelError::Autodiff(e))
    }
}
