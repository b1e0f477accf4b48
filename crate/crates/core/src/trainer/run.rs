use std::io::Write;

use serde::{Deserialize, Serialize};

use super::batch::{build_batch, MultiTaskBatch};
use super::step::{joint_loss, train_step, StepReport, TrainState};
use super::{TrainConfig, TrainError};
use crate::autodiff::{argmax, Mode};
use crate::data::{Example, Split, TaskCollection, TaskKind};
use crate::model::{merge_and_export, BaseWeights, LoraAdapters, LoraConfig, MergedModel, ModelConfig, ParamSet, PrefixKV};
use crate::prefixnas::{
    discretize, export_architecture, l1_discretization_distance, l2_discretization_distance, prune_weak,
    ArchitectureExport, RelaxContext, SearchSpace, Strategy,
};
use crate::rng::substream;

/// Model shape matching a task collection's vocabulary, lengths and heads.
pub fn model_config_for(
    data: &TaskCollection,
    d_model: usize,
    n_heads: usize,
    n_blocks: usize,
    d_ff: usize,
) -> ModelConfig {
    ModelConfig {
        d_model,
        n_heads,
        n_blocks,
        d_ff,
        vocab_size: data.vocab_size,
        max_seq: data.max_seq_len(),
        n_classes: data.tasks.iter().map(|t| t.spec.n_outputs()).collect(),
    }
}

fn task_score(logits: &crate::autodiff::Tensor, examples: &[Example], kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Classification => {
            let hits = examples
                .iter()
                .enumerate()
                .filter(|(i, e)| e.label.class() == Some(argmax(logits.row(*i))))
                .count();
            hits as f64 / examples.len() as f64
        }
        // Coefficient of determination, floored at zero.
        TaskKind::Regression => {
            let y: Vec<f64> = examples.iter().map(|e| e.label.value()).collect();
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let mse = y.iter().enumerate().map(|(i, v)| (logits.row(i)[0] - v).powi(2)).sum::<f64>() / n;
            if var == 0.0 {
                0.0
            } else {
                (1.0 - mse / var).max(0.0)
            }
        }
    }
}

/// Per-task validation score (accuracy, or floored R² for regression).
pub fn evaluate(
    base: &BaseWeights,
    adapters: Option<&LoraAdapters>,
    prefix: Option<&PrefixKV>,
    data: &TaskCollection,
    split: Split,
) -> Result<Vec<f64>, TrainError> {
    data.tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let ex = t.split(split);
            if ex.is_empty() {
                return Err(TrainError::Data(format!("task {i} has an empty {split:?} split")));
            }
            let tokens: Vec<Vec<usize>> = ex.iter().map(|e| e.tokens.clone()).collect();
            let logits = base.logits(adapters, prefix, &tokens, i)?;
            Ok(task_score(&logits, ex, t.spec.kind))
        })
        .collect()
}

fn eval_context(config: &TrainConfig) -> RelaxContext {
    RelaxContext {
        strategy: match config.strategy {
            Strategy::Gumbel => Strategy::Softmax,
            s => s,
        },
        temperature: config.temperature,
        noise_key: 0,
    }
}

fn state_prefix(state: &TrainState) -> Result<Option<PrefixKV>, TrainError> {
    if !state.config.mode.uses_prefix() || state.generator.prefix_len == 0 {
        return Ok(None);
    }
    let alpha = (!state.generator.is_discretized()).then_some(&state.alpha);
    Ok(Some(state.generator.prefix(alpha, &eval_context(&state.config), Mode::Eval)?))
}

fn state_adapters(state: &TrainState) -> Option<&LoraAdapters> {
    (state.config.mode.uses_lora() && !state.adapters.is_empty()).then_some(&state.adapters)
}

pub fn evaluate_state(state: &TrainState, data: &TaskCollection, split: Split) -> Result<Vec<f64>, TrainError> {
    let prefix = state_prefix(state)?;
    evaluate(&state.base, state_adapters(state), prefix.as_ref(), data, split)
}

pub fn evaluate_merged(model: &MergedModel, data: &TaskCollection, split: Split) -> Result<Vec<f64>, TrainError> {
    let prefix = model.prefix()?;
    evaluate(&model.base, None, Some(&prefix), data, split)
}

/// Early stopping on a metric where larger is better.
#[derive(Clone, Debug, PartialEq)]
pub struct StopTracker {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
}

impl StopTracker {
    pub fn new(patience: usize) -> Self {
        StopTracker {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records `metric` for `epoch`; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_joint_loss: f64,
    pub val_scores: Vec<f64>,
    pub val_macro: f64,
    pub pruned: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Final state with the architecture fixed.
    pub state: TrainState,
    pub merged: MergedModel,
    pub architecture: ArchitectureExport,
    pub history: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_val_macro: f64,
    pub stopped_early: bool,
    /// Validation scores of the returned merged model.
    pub final_val_scores: Vec<f64>,
    pub final_val_macro: f64,
    pub trainable_params: usize,
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

pub(crate) fn prune_state(state: &mut TrainState) -> Result<bool, TrainError> {
    let max_k = state.alpha.rows.iter().map(|r| r.numel()).max().unwrap_or(1);
    if max_k < 2 {
        return Ok(false);
    }
    let before = state.generator.op_counts();
    let threshold = state.config.prune_factor / max_k as f64;
    let mut alpha = state.alpha.clone();
    let outcome = prune_weak(&mut alpha, threshold)?;
    if !outcome.removed_any(&before) {
        return Ok(false);
    }
    state.generator.retain_ops(&outcome.kept)?;
    state.alpha = alpha;
    for (i, kept) in outcome.kept.iter().enumerate() {
        state.optimizer.remap(&format!("alpha.layer{i}"), kept);
    }
    let names: Vec<String> = state
        .adapters
        .named()
        .into_iter()
        .chain(state.generator.named())
        .chain(state.alpha.named())
        .map(|(n, _)| n)
        .collect();
    state.optimizer.retain_names(&names);
    Ok(true)
}

/// Per-step and per-epoch records of the search phase.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchLog {
    pub history: Vec<StepReport>,
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_val_macro: f64,
    pub stopped_early: bool,
}

/// Runs the epoch loop on `state` (steps, pruning, validation, early
/// stopping) without fixing the architecture.
pub fn run_search(state: &mut TrainState, data: &TaskCollection) -> Result<SearchLog, TrainError> {
    let config = state.config.clone();
    let train: Vec<&[Example]> = data.tasks.iter().map(|t| t.train.as_slice()).collect();
    let mut tracker = StopTracker::new(config.patience);
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..config.max_epochs {
        let mut losses = Vec::with_capacity(config.steps_per_epoch());
        for s in 0..config.steps_per_epoch() {
            let mut rng = substream(config.seed, "batch", &[epoch as u64, s as u64]);
            let batch = build_batch(&train, config.gamma, &mut rng)?;
            let mut report = train_step(state, &batch)?;
            report.epoch = epoch;
            losses.push(report.joint_loss);
            history.push(report);
        }
        let pruned = if config.prune_factor > 0.0 && state.searching() {
            prune_state(state)?
        } else {
            false
        };
        let val_scores = evaluate_state(state, data, Split::Val)?;
        let val_macro = mean(&val_scores);
        epochs.push(EpochReport {
            epoch,
            mean_joint_loss: mean(&losses),
            val_scores,
            val_macro,
            pruned,
        });
        if tracker.observe(epoch, val_macro) {
            stopped_early = true;
            break;
        }
    }
    Ok(SearchLog {
        history,
        epochs,
        best_epoch: tracker.best_epoch,
        best_val_macro: tracker.best,
        stopped_early,
    })
}

/// Fixes the argmax architecture, merges the adapters and scores the
/// merged model on validation.
pub fn finish_search(mut state: TrainState, log: SearchLog, data: &TaskCollection) -> Result<TrainOutcome, TrainError> {
    let trainable_params = state.trainable_count();
    let architecture = export_architecture(&state.generator, &state.alpha)?;
    if !state.generator.is_discretized() {
        let choice = discretize(&state.alpha);
        state.generator.fix_architecture(&choice)?;
    }
    let adapters = state_adapters(&state).cloned().unwrap_or_default();
    let merged = merge_and_export(&state.base, &adapters, &state.generator, &state.alpha)?;
    let final_val_scores = evaluate_merged(&merged, data, Split::Val)?;
    let final_val_macro = mean(&final_val_scores);
    Ok(TrainOutcome {
        state,
        merged,
        architecture,
        history: log.history,
        epochs: log.epochs,
        best_epoch: log.best_epoch,
        best_val_macro: log.best_val_macro,
        stopped_early: log.stopped_early,
        final_val_scores,
        final_val_macro,
        trainable_params,
    })
}

/// Trains until `max_epochs` or early stopping, then fixes the argmax
/// architecture and merges the adapters into the base.
pub fn train_loop(
    base: BaseWeights,
    lora: &LoraConfig,
    space: &SearchSpace,
    config: &TrainConfig,
    data: &TaskCollection,
) -> Result<TrainOutcome, TrainError> {
    let kinds: Vec<TaskKind> = data.tasks.iter().map(|t| t.spec.kind).collect();
    let mut state = TrainState::new(base, lora, space, config.clone(), kinds)?;
    let trainable_params = state.trainable_count();
    let log = run_search(&mut state, data)?;
    let mut out = finish_search(state, log, data)?;
    out.trainable_params = trainable_params;
    Ok(out)
}

/// Distance of α from its one-hot argmax and the loss change from swapping
/// the relaxed mixture for the single path, measured on `split`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationGap {
    pub l1_per_layer: Vec<f64>,
    pub l2: f64,
    pub relaxed_loss: f64,
    pub discrete_loss: f64,
    pub loss_gap: f64,
}

pub fn discretization_gap(state: &TrainState, data: &TaskCollection, split: Split) -> Result<DiscretizationGap, TrainError> {
    if state.generator.is_discretized() {
        return Err(TrainError::Contract("architecture already discretized".into()));
    }
    let sets: Vec<&[Example]> = data.tasks.iter().map(|t| t.split(split)).collect();
    if let Some(i) = sets.iter().position(|s| s.is_empty()) {
        return Err(TrainError::Data(format!("task {i} has an empty {split:?} split")));
    }
    let batch = MultiTaskBatch::full(&sets);
    // The relaxed side is always the plain softmax mixture, whatever the
    // training strategy, so hard-forward strategies are not trivially gap-free.
    let mut relaxed_state = state.clone();
    relaxed_state.config.strategy = Strategy::Softmax;
    let relaxed = joint_loss(&relaxed_state, &batch, Mode::Eval)?;
    let mut fixed = state.clone();
    fixed.generator.fix_architecture(&discretize(&state.alpha))?;
    let discrete = joint_loss(&fixed, &batch, Mode::Eval)?;
    let relaxed_loss = mean(&relaxed.task_losses);
    let discrete_loss = mean(&discrete.task_losses);
    Ok(DiscretizationGap {
        l1_per_layer: l1_discretization_distance(&state.alpha),
        l2: l2_discretization_distance(&state.alpha),
        relaxed_loss,
        discrete_loss,
        loss_gap: (relaxed_loss - discrete_loss).abs(),
    })
}

/// One CSV row per step.
pub fn write_history_csv<W: Write>(out: W, history: &[StepReport]) -> Result<(), TrainError> {
    let n_tasks = history.first().map_or(0, |r| r.task_losses.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["step", "epoch", "joint_loss", "regularizer", "lambda"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_tasks).map(|i| format!("loss_task{i}")));
    header.extend(
        [
            "grad_norm_total",
            "grad_norm_lora",
            "grad_norm_prefix",
            "grad_norm_alpha",
            "alpha_variance",
            "lr",
            "cross_lipschitz",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in history {
        let mut row = vec![
            r.step.to_string(),
            r.epoch.to_string(),
            r.joint_loss.to_string(),
            r.regularizer.to_string(),
            r.lambda.to_string(),
        ];
        row.extend(r.task_losses.iter().map(f64::to_string));
        row.extend(
            [r.grad_norm, r.grad_norm_lora, r.grad_norm_prefix, r.grad_norm_alpha, r.alpha_variance, r.lr]
                .iter()
                .map(f64::to_string),
        );
        row.push(r.cross_lipschitz.map_or_else(String::new, |v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
