use serde::{Deserialize, Serialize};

use super::batch::build_batch;
use super::optim::{OptimizerKind, OptimizerState};
use super::TrainError;
use crate::autodiff::{Graph, Mode};
use crate::data::{Example, Label, TaskCollection, TaskKind};
use crate::model::{model_forward, BaseWeights, ModelConfig, ModelVars, ParamSet};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            lr: 3e-3,
            gamma: 0.1,
            seed: 17,
        }
    }
}

/// Fits every base weight (heads included) to `data` with Adam on the mean
/// task loss. The result is the frozen starting point for adaptation.
pub fn pretrain_base(model: &ModelConfig, data: &TaskCollection, cfg: &PretrainConfig) -> Result<BaseWeights, TrainError> {
    model.validate()?;
    if data.n_tasks() != model.n_tasks() {
        return Err(TrainError::Task(format!(
            "{} tasks for a model with {} heads",
            data.n_tasks(),
            model.n_tasks()
        )));
    }
    let mut base = BaseWeights::init(model, &mut substream(cfg.seed, "base-init", &[]))?;
    let mut opt = OptimizerState::new(OptimizerKind::Adam);
    let train: Vec<&[Example]> = data.tasks.iter().map(|t| t.train.as_slice()).collect();
    for step in 0..cfg.steps {
        let batch = build_batch(&train, cfg.gamma, &mut substream(cfg.seed, "pretrain-batch", &[step as u64]))?;
        let mut g = Graph::new(Mode::Train {
            seed: cfg.seed,
            step: step as u64,
        });
        let leaves = base.leaf_vars(&mut g, true);
        let bv = crate::model::BaseVars::from_vars(model, &leaves);
        let vars = ModelVars {
            base: &bv,
            adapters: None,
            prefix: None,
        };
        let mut total = None;
        for tb in &batch.tasks {
            let logits = model_forward(&mut g, model, &vars, &tb.tokens, tb.task)?;
            let loss = match data.tasks[tb.task].spec.kind {
                TaskKind::Classification => {
                    let y: Vec<usize> = tb.labels.iter().filter_map(|l| l.class()).collect();
                    g.cross_entropy(logits, &y)?
                }
                TaskKind::Regression => {
                    let y: Vec<f64> = tb.labels.iter().map(|l| Label::value(*l)).collect();
                    g.mse(logits, &y)?
                }
            };
            total = Some(match total {
                None => loss,
                Some(t) => g.add(t, loss)?,
            });
        }
        let total = total.ok_or_else(|| TrainError::Data("no tasks to pretrain on".into()))?;
        let loss = g.scale(total, 1.0 / batch.tasks.len() as f64)?;
        if !g.scalar(loss).is_finite() {
            return Err(TrainError::Numeric {
                step: step as u64,
                detail: "pretraining loss is not finite".into(),
            });
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = leaves
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
            .collect();
        for ((name, t), gr) in base.named_mut().into_iter().zip(&grads) {
            opt.update(&name, t, gr, cfg.lr);
        }
    }
    Ok(base)
}
