//! Analysis artifacts at desk scale: relaxation-strategy stability,
//! parameter overhead, the adapter-switching latency model and
//! hyperparameter sensitivity sweeps.

mod report;

pub use report::{
    write_json, write_latency_csv, write_overhead_csv, write_relaxation_runs_csv, write_relaxation_series_csv,
    write_relaxation_summary_csv, write_sensitivity_csv,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Split, TaskCollection, TaskKind};
use crate::model::{BaseWeights, LoraAdapters, LoraConfig, ParamSet};
use crate::prefixnas::{PrefixGenerator, SearchSpace, Strategy};
use crate::trainer::{
    discretization_gap, finish_search, run_search, train_loop, DiscretizationGap, TrainConfig, TrainError, TrainState,
};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Shared inputs of every training-based diagnostic.
#[derive(Clone, Debug)]
pub struct RunSetup<'a> {
    pub base: &'a BaseWeights,
    pub data: &'a TaskCollection,
    pub lora: LoraConfig,
    pub space: SearchSpace,
    pub train: TrainConfig,
}

impl RunSetup<'_> {
    fn kinds(&self) -> Vec<TaskKind> {
        self.data.tasks.iter().map(|t| t.spec.kind).collect()
    }
}

/// Maps `f` over `items` on scoped worker threads, preserving order.
fn par_map<T: Sync, U: Send, E: Send>(items: &[T], f: impl Fn(&T) -> Result<U, E> + Sync) -> Result<Vec<U>, E> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("diagnostic worker panicked"))
            .collect()
    })
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    mean(&x.iter().map(|v| (v - m).powi(2)).collect::<Vec<_>>())
}

/// One training run under one relaxation strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub grad_norm_mean: f64,
    pub grad_norm_std: f64,
    pub grad_norm_var: f64,
    /// Temporal variance of each α coordinate over the run, averaged.
    pub alpha_variance: f64,
    pub final_val_macro: f64,
    pub gap: DiscretizationGap,
    /// α-gradient norm at every step.
    pub grad_norm_series: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub grad_norm_mean: f64,
    pub grad_norm_std: f64,
    pub alpha_variance: f64,
    pub final_val_macro: f64,
    pub loss_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelaxationReport {
    pub summaries: Vec<StrategySummary>,
    /// Strategy-major, seeds in the order given.
    pub runs: Vec<RelaxationRun>,
}

impl RelaxationReport {
    pub fn run(&self, strategy: Strategy, seed: u64) -> Option<&RelaxationRun> {
        self.runs.iter().find(|r| r.strategy == strategy && r.seed == seed)
    }
}

/// Trains once under `strategy` with pruning off so α keeps its shape, then
/// measures the gap on validation before fixing the architecture.
pub fn relaxation_run(setup: &RunSetup, strategy: Strategy, seed: u64) -> Result<RelaxationRun, DiagnosticsError> {
    let config = TrainConfig {
        strategy,
        seed,
        prune_factor: 0.0,
        ..setup.train.clone()
    };
    if !config.mode.uses_prefix() {
        return Err(DiagnosticsError::Config("relaxation comparison needs the prefix generator".into()));
    }
    let mut state = TrainState::new(setup.base.clone(), &setup.lora, &setup.space, config, setup.kinds())?;
    let log = run_search(&mut state, setup.data)?;
    if log.history.is_empty() {
        return Err(DiagnosticsError::Config("relaxation comparison needs at least one step".into()));
    }
    let gap = discretization_gap(&state, setup.data, Split::Val)?;
    let series: Vec<f64> = log.history.iter().map(|r| r.grad_norm_alpha).collect();
    let n_coords = log.history[0].alpha.len();
    let alpha_variance = mean(
        &(0..n_coords)
            .map(|j| variance(&log.history.iter().map(|r| r.alpha[j]).collect::<Vec<_>>()))
            .collect::<Vec<_>>(),
    );
    let out = finish_search(state, log, setup.data)?;
    let grad_norm_var = variance(&series);
    Ok(RelaxationRun {
        strategy,
        seed,
        grad_norm_mean: mean(&series),
        grad_norm_std: grad_norm_var.sqrt(),
        grad_norm_var,
        alpha_variance,
        final_val_macro: out.final_val_macro,
        gap,
        grad_norm_series: series,
    })
}

/// Matched runs (same data order and initialization per seed) for every
/// strategy. Summaries average the per-run statistics over seeds.
pub fn relaxation_comparison(
    setup: &RunSetup,
    strategies: &[Strategy],
    seeds: &[u64],
) -> Result<RelaxationReport, DiagnosticsError> {
    if strategies.len() < 2 || seeds.len() < 5 {
        return Err(DiagnosticsError::Config(format!(
            "need at least 2 strategies and 5 seeds, got {} and {}",
            strategies.len(),
            seeds.len()
        )));
    }
    let jobs: Vec<(Strategy, u64)> = strategies.iter().flat_map(|&s| seeds.iter().map(move |&x| (s, x))).collect();
    let runs = par_map(&jobs, |&(s, seed)| relaxation_run(setup, s, seed))?;
    let summaries = strategies
        .iter()
        .map(|&s| {
            let rs: Vec<&RelaxationRun> = runs.iter().filter(|r| r.strategy == s).collect();
            let avg = |f: fn(&RelaxationRun) -> f64| mean(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            StrategySummary {
                strategy: s,
                grad_norm_mean: avg(|r| r.grad_norm_mean),
                grad_norm_std: avg(|r| r.grad_norm_std),
                alpha_variance: avg(|r| r.alpha_variance),
                final_val_macro: avg(|r| r.final_val_macro),
                loss_gap: avg(|r| r.gap.loss_gap),
            }
        })
        .collect();
    Ok(RelaxationReport { summaries, runs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub base_params: usize,
    pub lora_params: usize,
    pub prefix_params: usize,
    /// `(lora + prefix) / base`.
    pub ratio: f64,
}

/// Exact parameter counts. An absent generator, or one producing no
/// prefix tokens, contributes nothing.
pub fn param_overhead(base: &BaseWeights, adapters: &LoraAdapters, generator: Option<&PrefixGenerator>) -> OverheadReport {
    let base_params = base.param_count();
    let lora_params = adapters.param_count();
    let prefix_params = generator.filter(|g| g.prefix_len > 0).map_or(0, ParamSet::param_count);
    OverheadReport {
        base_params,
        lora_params,
        prefix_params,
        // Both operands are exact integers well below 2^53, so the quotient
        // is the correctly rounded rational.
        ratio: (lora_params + prefix_params) as f64 / base_params as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub t_forward_ms: f64,
    pub t_switch_ms: f64,
    pub n_tasks: usize,
    /// `n·(t_f + t_s)`: one adapter swap per task.
    pub multi_adapter_ms: f64,
    /// `n·t_f`: a single unified adapter.
    pub unified_ms: f64,
    pub reduction_pct: f64,
}

pub fn switching_latency_model(t_forward_ms: f64, t_switch_ms: f64, n_tasks: usize) -> Result<LatencyReport, DiagnosticsError> {
    if !(t_forward_ms.is_finite() && t_forward_ms > 0.0) {
        return Err(DiagnosticsError::Config(format!("t_f must be positive, got {t_forward_ms}")));
    }
    if !(t_switch_ms.is_finite() && t_switch_ms >= 0.0) {
        return Err(DiagnosticsError::Config(format!("t_s must be nonnegative, got {t_switch_ms}")));
    }
    if n_tasks == 0 {
        return Err(DiagnosticsError::Config("n_tasks must be at least 1".into()));
    }
    let n = n_tasks as f64;
    let multi_adapter_ms = n * (t_forward_ms + t_switch_ms);
    let unified_ms = n * t_forward_ms;
    Ok(LatencyReport {
        t_forward_ms,
        t_switch_ms,
        n_tasks,
        multi_adapter_ms,
        unified_ms,
        reduction_pct: 100.0 * t_switch_ms / (t_forward_ms + t_switch_ms),
    })
}

/// Knob values to cross; every combination is trained once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityGrid {
    pub n_layers: Vec<usize>,
    pub block_repetition: Vec<usize>,
    pub prefix_length: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridPoint {
    pub n_layers: usize,
    pub block_repetition: usize,
    pub prefix_length: usize,
}

impl SensitivityGrid {
    pub fn points(&self) -> Vec<GridPoint> {
        self.n_layers
            .iter()
            .flat_map(|&n_layers| {
                self.block_repetition.iter().flat_map(move |&block_repetition| {
                    self.prefix_length.iter().map(move |&prefix_length| GridPoint {
                        n_layers,
                        block_repetition,
                        prefix_length,
                    })
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub point: GridPoint,
    pub seed: u64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
    /// Mean score per grid point, in grid order.
    pub means: Vec<(GridPoint, f64)>,
    /// Highest mean; the earliest point wins ties.
    pub best: (GridPoint, f64),
}

pub fn sensitivity_sweep(setup: &RunSetup, grid: &SensitivityGrid, seeds: &[u64]) -> Result<SensitivityReport, DiagnosticsError> {
    let points = grid.points();
    if points.is_empty() || seeds.is_empty() {
        return Err(DiagnosticsError::Config("sensitivity grid and seed list must be nonempty".into()));
    }
    let jobs: Vec<(GridPoint, u64)> = points.iter().flat_map(|&p| seeds.iter().map(move |&s| (p, s))).collect();
    let rows = par_map(&jobs, |&(point, seed)| {
        let space = SearchSpace {
            n_layers: point.n_layers,
            block_repetition: point.block_repetition,
            ..setup.space.clone()
        };
        let config = TrainConfig {
            seed,
            prefix_len: point.prefix_length,
            ..setup.train.clone()
        };
        let out = train_loop(setup.base.clone(), &setup.lora, &space, &config, setup.data)?;
        Ok::<_, DiagnosticsError>(SensitivityRow {
            point,
            seed,
            score: out.final_val_macro,
        })
    })?;
    let means: Vec<(GridPoint, f64)> = points
        .iter()
        .map(|&p| {
            let s: Vec<f64> = rows.iter().filter(|r| r.point == p).map(|r| r.score).collect();
            (p, mean(&s))
        })
        .collect();
    let best = means
        .iter()
        .copied()
        .reduce(|a, b| if b.1 > a.1 { b } else { a })
        .expect("nonempty grid");
    Ok(SensitivityReport { rows, means, best })
}

#[cfg(test)]
mod tests;
