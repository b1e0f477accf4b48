//! Toy pre-LN transformer encoder with a frozen base, LoRA adapters on the
//! attention projections, and per-block prefix key/value injection.
//!
//! Weight matrices are stored `out × in` and applied as `x · Wᵀ`. An adapter
//! `(B, A)` contributes `scale · B·Aᵀ` to its target.

mod base;
mod checkpoint;
mod forward;
mod lora;

pub use base::{BaseVars, BaseWeights, BlockWeights, HeadWeights};
pub use checkpoint::{merge_and_export, Checkpoint, MergedModel, CHECKPOINT_VERSION};
pub use forward::{attention_with_prefix, model_forward, ModelVars, PrefixKV, PrefixVars};
pub use lora::{apply_lora, AdapterVar, AdapterVars, LoraAdapter, LoraAdapters, LoraConfig, LoraMode, LoraTargets};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    /// Output width of each task head (1 for regression).
    pub n_classes: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            n_blocks: 2,
            d_ff: 64,
            vocab_size: 64,
            max_seq: 16,
            n_classes: vec![2; 4],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_blocks", self.n_blocks),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_classes.is_empty() || self.n_classes.contains(&0) {
            return Err(ModelError::Config("every task head needs a positive width".into()));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.n_classes.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Query, Projection::Key, Projection::Value, Projection::Output];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
            Projection::Output => "output",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LoraTarget {
    pub block: usize,
    pub projection: Projection,
}

/// A collection of tensors with stable names, visited in a fixed order.
/// Optimizer state is keyed by these names.
pub trait ParamSet {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Inserts every tensor into `g`, as tracked parameters when `trainable`.
    fn leaf_vars(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.named()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t) } else { g.constant(t) })
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown task {task}; model has {n_tasks} heads")]
    Task { task: usize, n_tasks: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("state error: {0}")]
    State(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
