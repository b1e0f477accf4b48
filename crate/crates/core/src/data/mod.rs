//! Synthetic multi-task collections and their JSON-lines file format.
//!
//! Four generator families share one latent "pattern vocabulary" per
//! collection seed:
//!
//! * `token_pattern` – label is which trigger set (if any) occurs; a
//!   bag-of-tokens model solves it.
//! * `order_sensitive` – two markers always occur; label is their order, so
//!   bag-of-tokens is at chance.
//! * `numeric_aggregation` – every filler token carries a hidden ±1 value;
//!   the label bins the sum (or the target is the scaled sum).
//! * `parity_of_subset` – label is the parity of the count of tokens from a
//!   hidden subset.

mod generate;
mod io;

pub use generate::generate_tasks;
pub use io::{load_collection, save_collection, write_collection, FORMAT_VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    TokenPattern,
    OrderSensitive,
    NumericAggregation,
    ParityOfSubset,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 4] = [
        TaskFamily::TokenPattern,
        TaskFamily::OrderSensitive,
        TaskFamily::NumericAggregation,
        TaskFamily::ParityOfSubset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::TokenPattern => "token_pattern",
            TaskFamily::OrderSensitive => "order_sensitive",
            TaskFamily::NumericAggregation => "numeric_aggregation",
            TaskFamily::ParityOfSubset => "parity_of_subset",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: usize,
    pub kind: TaskKind,
    /// Number of classes; ignored (and conventionally 1) for regression.
    pub n_classes: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub family: TaskFamily,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskSpec {
    pub fn classification(
        id: usize,
        family: TaskFamily,
        n_classes: usize,
        seq_len: usize,
        vocab_size: usize,
        sizes: (usize, usize, usize),
    ) -> Self {
        TaskSpec {
            id,
            kind: TaskKind::Classification,
            n_classes,
            seq_len,
            vocab_size,
            family,
            train_size: sizes.0,
            val_size: sizes.1,
            test_size: sizes.2,
            seed: 0,
        }
    }

    /// Width of the model head this task needs.
    pub fn n_outputs(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.n_classes,
            TaskKind::Regression => 1,
        }
    }
}

/// Default desk collection: one task per family, 600/200/200 examples,
/// vocabulary 64, sequence length 16.
pub fn default_specs() -> Vec<TaskSpec> {
    specs_for(&TaskFamily::ALL, 64, 16, (600, 200, 200))
}

/// One binary classification task per listed family.
pub fn specs_for(
    families: &[TaskFamily],
    vocab_size: usize,
    seq_len: usize,
    sizes: (usize, usize, usize),
) -> Vec<TaskSpec> {
    families
        .iter()
        .enumerate()
        .map(|(id, &f)| TaskSpec::classification(id, f, 2, seq_len, vocab_size, sizes))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Value(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Value(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskData {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskCollection {
    pub seed: u64,
    pub vocab_size: usize,
    pub tasks: Vec<TaskData>,
}

impl TaskCollection {
    pub fn specs(&self) -> Vec<TaskSpec> {
        self.tasks.iter().map(|t| t.spec.clone()).collect()
    }

    pub fn max_seq_len(&self) -> usize {
        self.tasks.iter().map(|t| t.spec.seq_len).max().unwrap_or(0)
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("data error at line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("task {task} has an empty {split:?} split")]
    Empty { task: usize, split: Split },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
