//! Outer hyperparameter search: a Tree-structured Parzen Estimator over
//! learning rate, prefix length and regularization weight, each trial
//! running a full inner training and architecture search.

mod space;
mod store;
mod tpe;

pub use space::{Dimension, HpoSpace, ParamKind, Point, Scale};
pub use store::{load_trials, write_leaderboard_csv, TrialStore};
pub use tpe::{random_suggest, tpe_suggest, TpeConfig};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TaskCollection;
use crate::model::{BaseWeights, Checkpoint, LoraConfig};
use crate::prefixnas::{ArchitectureExport, SearchSpace};
use crate::rng::substream;
use crate::trainer::{train_loop, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum HpoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("all {0} trials failed")]
    AllFailed(usize),
    #[error("trial store error at line {line}: {message}")]
    Store { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Pruned,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub id: usize,
    pub params: Point,
    pub status: TrialStatus,
    /// Macro validation score; present only for completed trials.
    pub score: Option<f64>,
    /// The inner search's discovered architecture.
    pub architecture: Option<ArchitectureExport>,
    pub error: Option<String>,
}

impl TrialRecord {
    pub fn completed_score(&self) -> Option<f64> {
        match self.status {
            TrialStatus::Completed => self.score,
            _ => None,
        }
    }
}

/// What an objective returns for one point.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub score: f64,
    pub architecture: Option<ArchitectureExport>,
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    Tpe(TpeConfig),
    Random,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HpoResult {
    pub best: TrialRecord,
    pub best_checkpoint: Option<Checkpoint>,
    /// Completed trials, best first (ties by id).
    pub leaderboard: Vec<TrialRecord>,
    pub trials: Vec<TrialRecord>,
}

/// Proposes the point for trial `id` given the history so far. Startup
/// draws for both samplers come from the same stream, so a TPE run and a
/// random run with equal seeds share their first `n_startup` points.
pub fn suggest(sampler: &Sampler, history: &[TrialRecord], space: &HpoSpace, seed: u64, id: usize) -> Result<Point, HpoError> {
    match sampler {
        Sampler::Random => random_suggest(space, &mut substream(seed, "hpo-prior", &[id as u64])),
        Sampler::Tpe(cfg) => {
            let completed = history.iter().filter(|t| t.completed_score().is_some()).count();
            if completed < cfg.n_startup {
                random_suggest(space, &mut substream(seed, "hpo-prior", &[id as u64]))
            } else {
                tpe_suggest(history, space, cfg, &mut substream(seed, "hpo-tpe", &[id as u64]))
            }
        }
    }
}

/// Runs `n_trials` sequential suggest/evaluate rounds. Records already in
/// `store` count toward `n_trials` and are not re-run.
pub fn hpo_run<F>(
    space: &HpoSpace,
    sampler: &Sampler,
    n_trials: usize,
    seed: u64,
    mut store: Option<&mut TrialStore>,
    mut objective: F,
) -> Result<HpoResult, HpoError>
where
    F: FnMut(&Point) -> Result<TrialResult, String>,
{
    space.validate()?;
    if n_trials == 0 {
        return Err(HpoError::Config("n_trials must be at least 1".into()));
    }
    let mut trials: Vec<TrialRecord> = store.as_ref().map(|s| s.records().to_vec()).unwrap_or_default();
    let mut best: Option<(f64, usize, Option<Checkpoint>)> = None;
    for t in &trials {
        if let Some(s) = t.completed_score() {
            if best.as_ref().is_none_or(|(b, _, _)| s > *b) {
                best = Some((s, t.id, None));
            }
        }
    }
    while trials.len() < n_trials {
        let id = trials.len();
        let params = suggest(sampler, &trials, space, seed, id)?;
        let record = match objective(&params) {
            Ok(r) if r.score.is_finite() => {
                if best.as_ref().is_none_or(|(b, _, _)| r.score > *b) {
                    best = Some((r.score, id, r.checkpoint.clone()));
                }
                TrialRecord {
                    id,
                    params,
                    status: TrialStatus::Completed,
                    score: Some(r.score),
                    architecture: r.architecture,
                    error: None,
                }
            }
            Ok(r) => TrialRecord {
                id,
                params,
                status: TrialStatus::Failed,
                score: None,
                architecture: None,
                error: Some(format!("non-finite score {}", r.score)),
            },
            Err(e) => TrialRecord {
                id,
                params,
                status: TrialStatus::Failed,
                score: None,
                architecture: None,
                error: Some(e),
            },
        };
        if let Some(s) = store.as_deref_mut() {
            s.append(&record)?;
        }
        trials.push(record);
    }
    let (_, best_id, best_checkpoint) = best.ok_or(HpoError::AllFailed(trials.len()))?;
    let mut leaderboard: Vec<TrialRecord> = trials.iter().filter(|t| t.completed_score().is_some()).cloned().collect();
    leaderboard.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.id.cmp(&b.id))
    });
    Ok(HpoResult {
        best: trials[best_id].clone(),
        best_checkpoint,
        leaderboard,
        trials,
    })
}

/// Fixed pieces of every inner run.
#[derive(Clone, Debug)]
pub struct InnerSetup<'a> {
    pub base: &'a BaseWeights,
    pub data: &'a TaskCollection,
    pub lora: LoraConfig,
    pub space: SearchSpace,
    pub train: TrainConfig,
    /// Epoch budget per trial.
    pub budget: usize,
}

/// Applies `h` on top of the setup's training config.
pub fn trial_config(setup: &InnerSetup, h: &Point) -> Result<(TrainConfig, SearchSpace), HpoError> {
    let mut cfg = setup.train.clone();
    let mut space = setup.space.clone();
    cfg.max_epochs = setup.budget;
    for (name, &v) in h {
        match name.as_str() {
            "lr" => cfg.lr = v,
            "prefix_length" => cfg.prefix_len = v.round() as usize,
            "lambda" => cfg.lambda = v,
            "k" => space.ops_per_layer = v.round() as usize,
            "n_layers" => space.n_layers = v.round() as usize,
            other => return Err(HpoError::Config(format!("unknown hyperparameter {other:?}"))),
        }
    }
    Ok((cfg, space))
}

/// Full inner loop under `h`; the score is the merged model's macro
/// validation accuracy.
pub fn evaluate_trial(setup: &InnerSetup, h: &Point) -> Result<TrialResult, TrainError> {
    let (cfg, space) = trial_config(setup, h).map_err(|e| TrainError::Config(e.to_string()))?;
    let out = train_loop(setup.base.clone(), &setup.lora, &space, &cfg, setup.data)?;
    Ok(TrialResult {
        score: out.final_val_macro,
        architecture: Some(out.architecture),
        checkpoint: Some(out.merged.to_checkpoint()),
    })
}

/// A smooth 1-D objective over `lr` peaking at 1 when `lr = 5e-3`, used to
/// check that suggestions concentrate near a known optimum.
pub fn calibration_score(h: &Point) -> f64 {
    let lr = h.get("lr").copied().unwrap_or(f64::NAN);
    let z = (lr / CALIBRATION_OPTIMUM).ln() / 0.5;
    (-0.5 * z * z).exp()
}

pub const CALIBRATION_OPTIMUM: f64 = 5e-3;

/// Opens (or creates) the store at `path` and checks it matches `space`.
pub fn open_store(path: &Path, space: &HpoSpace) -> Result<TrialStore, HpoError> {
    let store = TrialStore::open(path)?;
    for r in store.records() {
        if let Err(e) = space.contains(&r.params) {
            return Err(HpoError::Store {
                line: r.id + 1,
                message: format!("record does not fit the search space: {e}"),
            });
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests;
