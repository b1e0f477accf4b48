use rand::seq::index::sample;
use rand::Rng;

use super::TrainError;
use crate::data::{Example, Label};

#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task: usize,
    pub tokens: Vec<Vec<usize>>,
    pub labels: Vec<Label>,
}

/// One mini-batch per task, in task order.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskBatch {
    pub tasks: Vec<TaskBatch>,
}

impl MultiTaskBatch {
    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.tokens.len()).collect()
    }

    /// Whole split per task, unshuffled.
    pub fn full(datasets: &[&[Example]]) -> Self {
        MultiTaskBatch {
            tasks: datasets
                .iter()
                .enumerate()
                .map(|(task, ex)| TaskBatch {
                    task,
                    tokens: ex.iter().map(|e| e.tokens.clone()).collect(),
                    labels: ex.iter().map(|e| e.label).collect(),
                })
                .collect(),
        }
    }
}

/// `b_i = max(1, ⌊γ·m_i⌋)`.
pub fn batch_sizes(sizes: &[usize], gamma: f64) -> Vec<usize> {
    sizes
        .iter()
        .map(|&m| ((gamma * m as f64).floor() as usize).clamp(1, m.max(1)))
        .collect()
}

/// Samples `b_i` examples per task uniformly without replacement.
pub fn build_batch<R: Rng + ?Sized>(
    datasets: &[&[Example]],
    gamma: f64,
    rng: &mut R,
) -> Result<MultiTaskBatch, TrainError> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(TrainError::Config(format!("gamma {gamma} outside (0, 1]")));
    }
    if let Some(i) = datasets.iter().position(|d| d.is_empty()) {
        return Err(TrainError::Data(format!("task {i} has no training examples")));
    }
    let sizes: Vec<usize> = datasets.iter().map(|d| d.len()).collect();
    let tasks = datasets
        .iter()
        .zip(batch_sizes(&sizes, gamma))
        .enumerate()
        .map(|(task, (ex, b))| {
            let idx = sample(rng, ex.len(), b);
            TaskBatch {
                task,
                tokens: idx.iter().map(|i| ex[i].tokens.clone()).collect(),
                labels: idx.iter().map(|i| ex[i].label).collect(),
            }
        })
        .collect();
    Ok(MultiTaskBatch { tasks })
}
