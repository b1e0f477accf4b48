use serde::{Deserialize, Serialize};

use super::batch::{MultiTaskBatch, TaskBatch};
use super::optim::OptimizerState;
use super::{TrainConfig, TrainError};
use crate::autodiff::{finite_diff_check_many, AutodiffError, Graph, Mode, Var};
use crate::data::{Label, TaskKind};
use crate::model::{model_forward, BaseWeights, LoraAdapters, LoraConfig, ModelError, ModelVars, ParamSet};
use crate::prefixnas::{
    entropy_var, generate_prefix, project_simplex, ArchParams, ArchVars, Parameterization, PrefixError,
    PrefixGenerator, RelaxContext, SearchSpace,
};
use crate::rng::{substream, substream_seed};

/// Everything that changes during training, plus the frozen base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub base: BaseWeights,
    pub adapters: LoraAdapters,
    pub generator: PrefixGenerator,
    pub alpha: ArchParams,
    pub optimizer: OptimizerState,
    pub kinds: Vec<TaskKind>,
    /// Completed optimizer steps.
    pub step: u64,
    /// Run length used by the `1/√T` schedule.
    pub horizon: usize,
}

impl TrainState {
    pub fn new(
        base: BaseWeights,
        lora: &LoraConfig,
        space: &SearchSpace,
        config: TrainConfig,
        kinds: Vec<TaskKind>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if kinds.len() != base.config.n_tasks() {
            return Err(TrainError::Task(format!(
                "{} task kinds for a base with {} heads",
                kinds.len(),
                base.config.n_tasks()
            )));
        }
        let mut rng = substream(config.seed, "init", &[]);
        let adapters = if config.mode.uses_lora() {
            LoraAdapters::init(lora, &base.config, &mut rng)?
        } else {
            LoraAdapters::default()
        };
        let prefix_len = if config.mode.uses_prefix() { config.prefix_len } else { 0 };
        let generator = PrefixGenerator::init(space, base.config.d_model, base.config.n_blocks, prefix_len, &mut rng)?;
        let alpha = ArchParams::uniform(space.n_layers, space.ops_per_layer, config.parameterization);
        let optimizer = OptimizerState::new(config.optimizer);
        let horizon = config.planned_steps();
        Ok(TrainState {
            config,
            base,
            adapters,
            generator,
            alpha,
            optimizer,
            kinds,
            step: 0,
            horizon,
        })
    }

    fn prefix_active(&self) -> bool {
        self.config.mode.uses_prefix() && self.generator.prefix_len > 0
    }

    /// Whether α still shapes the forward pass.
    pub fn searching(&self) -> bool {
        self.prefix_active() && !self.generator.is_discretized()
    }

    pub fn relax_context(&self, step: u64) -> RelaxContext {
        RelaxContext {
            strategy: self.config.strategy,
            temperature: self.config.temperature,
            noise_key: substream_seed(self.config.seed, "gumbel", &[step]),
        }
    }

    pub fn train_mode(&self, step: u64) -> Mode {
        Mode::Train {
            seed: substream_seed(self.config.seed, "dropout", &[]),
            step,
        }
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        if self.config.mode.uses_lora() && !self.config.freeze_lora {
            n += self.adapters.param_count();
        }
        if self.prefix_active() {
            n += self.generator.param_count();
            if !self.generator.is_discretized() {
                n += self.alpha.param_count();
            }
        }
        n
    }
}

/// Which parameter groups a step updates. All groups still take part in
/// the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpdateSet {
    pub lora: bool,
    pub prefix: bool,
    pub alpha: bool,
}

impl UpdateSet {
    pub const ALL: UpdateSet = UpdateSet {
        lora: true,
        prefix: true,
        alpha: true,
    };
}

/// Per-step record. `joint_loss = mean(task_losses) + lambda·regularizer`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub task_losses: Vec<f64>,
    pub regularizer: f64,
    pub lambda: f64,
    pub joint_loss: f64,
    /// Norm over every updated parameter, before clipping.
    pub grad_norm: f64,
    pub grad_norm_lora: f64,
    pub grad_norm_prefix: f64,
    pub grad_norm_alpha: f64,
    pub alpha_variance: f64,
    pub alpha: Vec<f64>,
    pub lr: f64,
    pub cross_lipschitz: Option<f64>,
    pub batch_sizes: Vec<usize>,
}

/// Loss components of one joint objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub task_losses: Vec<f64>,
    pub regularizer: f64,
    pub joint: f64,
}

struct Built {
    joint: Var,
    tasks: Vec<Var>,
    reg: Option<Var>,
    lora: Vec<Var>,
    generator: Vec<Var>,
    alpha: Vec<Var>,
}

fn task_loss(g: &mut Graph, logits: Var, kind: TaskKind, tb: &TaskBatch) -> Result<Var, TrainError> {
    match kind {
        TaskKind::Classification => {
            let classes = tb
                .labels
                .iter()
                .map(|l| l.class())
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| TrainError::Data(format!("task {} mixes regression labels into classification", tb.task)))?;
            Ok(g.cross_entropy(logits, &classes)?)
        }
        TaskKind::Regression => {
            let values: Vec<f64> = tb.labels.iter().map(|l| Label::value(*l)).collect();
            Ok(g.mse(logits, &values)?)
        }
    }
}

/// Binds `p` as fresh leaves, or takes its share of `supplied` when the
/// caller owns the leaves.
fn leaves<P: ParamSet>(g: &mut Graph, p: &P, trainable: bool, supplied: &mut Option<std::slice::Iter<'_, Var>>) -> Vec<Var> {
    match supplied {
        Some(it) => it.by_ref().take(p.named().len()).copied().collect(),
        None => p.leaf_vars(g, trainable),
    }
}

fn build(
    g: &mut Graph,
    state: &TrainState,
    batch: &MultiTaskBatch,
    trainable: UpdateSet,
    ctx: &RelaxContext,
) -> Result<Built, TrainError> {
    build_with(g, state, batch, trainable, ctx, None)
}

fn build_with(
    g: &mut Graph,
    state: &TrainState,
    batch: &MultiTaskBatch,
    trainable: UpdateSet,
    ctx: &RelaxContext,
    supplied: Option<&[Var]>,
) -> Result<Built, TrainError> {
    let mut supplied = supplied.map(|v| v.iter());
    if batch.tasks.is_empty() {
        return Err(TrainError::Data("empty multi-task batch".into()));
    }
    let base = state.base.bind(g, false);
    let use_lora = state.config.mode.uses_lora() && !state.adapters.is_empty();
    let lora = if use_lora {
        leaves(g, &state.adapters, trainable.lora, &mut supplied)
    } else {
        Vec::new()
    };
    let adapters = use_lora.then(|| state.adapters.vars_from(&lora));

    let (generator, alpha, prefix) = if state.prefix_active() {
        let gen_vars = leaves(g, &state.generator, trainable.prefix, &mut supplied);
        let gv = state.generator.vars_from(&gen_vars);
        let (alpha_vars, arch) = if state.generator.is_discretized() {
            (Vec::new(), None)
        } else {
            let rows = leaves(g, &state.alpha, trainable.alpha, &mut supplied);
            let arch = ArchVars {
                rows: rows.clone(),
                parameterization: state.alpha.parameterization,
            };
            (rows, Some(arch))
        };
        let pv = generate_prefix(g, &state.generator, &gv, arch.as_ref(), ctx)?;
        (gen_vars, alpha_vars, Some(pv))
    } else {
        (Vec::new(), Vec::new(), None)
    };

    let vars = ModelVars {
        base: &base,
        adapters: adapters.as_ref(),
        prefix: prefix.as_ref(),
    };
    let mut tasks = Vec::with_capacity(batch.tasks.len());
    for tb in &batch.tasks {
        let kind = *state
            .kinds
            .get(tb.task)
            .ok_or_else(|| TrainError::Task(format!("task {} outside {} tasks", tb.task, state.kinds.len())))?;
        let logits = model_forward(g, &state.base.config, &vars, &tb.tokens, tb.task)?;
        tasks.push(task_loss(g, logits, kind, tb)?);
    }
    let rows = tasks
        .iter()
        .map(|&t| g.reshape(t, &[1, 1]))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = g.concat_rows(&rows)?;
    let mut joint = g.mean(stacked)?;
    let reg = if !alpha.is_empty() {
        let r = entropy_var(g, &alpha, state.alpha.parameterization)?;
        let scaled = g.scale(r, state.config.lambda)?;
        joint = g.add(joint, scaled)?;
        Some(r)
    } else {
        None
    };
    Ok(Built {
        joint,
        tasks,
        reg,
        lora,
        generator,
        alpha,
    })
}

fn numeric(step: u64, e: TrainError) -> TrainError {
    match e {
        TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { op }))
        | TrainError::Prefix(PrefixError::Autodiff(AutodiffError::NonFinite { op })) => TrainError::Numeric {
            step,
            detail: format!("non-finite output from {op}"),
        },
        other => other,
    }
}

/// Evaluates the joint objective without updating anything.
pub fn joint_loss(state: &TrainState, batch: &MultiTaskBatch, mode: Mode) -> Result<LossParts, TrainError> {
    let mut g = Graph::new(mode);
    let step = match mode {
        Mode::Train { step, .. } => step,
        Mode::Eval => state.step,
    };
    let none = UpdateSet {
        lora: false,
        prefix: false,
        alpha: false,
    };
    let built = build(&mut g, state, batch, none, &state.relax_context(step)).map_err(|e| numeric(step, e))?;
    Ok(LossParts {
        task_losses: built.tasks.iter().map(|&t| g.scalar(t)).collect(),
        regularizer: built.reg.map_or(0.0, |r| g.scalar(r)),
        joint: g.scalar(built.joint),
    })
}

/// Largest relative error between the analytic gradient of the joint
/// objective and central differences, over every trainable LoRA,
/// generator and α coordinate. The relaxation uses the state's own
/// strategy, so hard-forward strategies will not match.
pub fn joint_gradient_error(state: &TrainState, batch: &MultiTaskBatch, mode: Mode, eps: f64) -> Result<f64, TrainError> {
    let step = match mode {
        Mode::Train { step, .. } => step,
        Mode::Eval => state.step,
    };
    let ctx = state.relax_context(step);
    let mut xs = Vec::new();
    if state.config.mode.uses_lora() && !state.adapters.is_empty() {
        xs.extend(state.adapters.named().into_iter().map(|(_, t)| t.clone()));
    }
    if state.prefix_active() {
        xs.extend(state.generator.named().into_iter().map(|(_, t)| t.clone()));
        if !state.generator.is_discretized() {
            xs.extend(state.alpha.named().into_iter().map(|(_, t)| t.clone()));
        }
    }
    let all = UpdateSet {
        lora: true,
        prefix: true,
        alpha: true,
    };
    let f = |g: &mut Graph, v: &[Var]| {
        build_with(g, state, batch, all, &ctx, Some(v))
            .map(|b| b.joint)
            .map_err(|e| AutodiffError::Contract(e.to_string()))
    };
    Ok(finite_diff_check_many(mode, f, &xs, eps)?)
}

fn grads_of(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], <[f64]>::to_vec))
        .collect()
}

fn sq_norm(groups: &[Vec<f64>]) -> f64 {
    groups.iter().flatten().map(|x| x * x).sum()
}

fn apply<P: ParamSet>(opt: &mut OptimizerState, params: &mut P, grads: &[Vec<f64>], lr: f64) {
    for ((name, t), g) in params.named_mut().into_iter().zip(grads) {
        opt.update(&name, t, g, lr);
    }
}

fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// One joint step with the mode's default update set. With
/// `per_task_updates` the tasks are visited in order, each followed by its
/// own update.
pub fn train_step(state: &mut TrainState, batch: &MultiTaskBatch) -> Result<StepReport, TrainError> {
    let update = UpdateSet {
        lora: state.config.mode.uses_lora() && !state.config.freeze_lora,
        prefix: state.config.mode.uses_prefix(),
        alpha: state.config.mode.uses_prefix(),
    };
    if !state.config.per_task_updates || batch.tasks.len() == 1 {
        return train_step_with(state, batch, update);
    }
    let step = state.step;
    let mut reports = Vec::with_capacity(batch.tasks.len());
    for tb in &batch.tasks {
        let single = MultiTaskBatch { tasks: vec![tb.clone()] };
        reports.push(update_once(state, &single, update, step)?);
    }
    state.step += 1;
    let task_losses: Vec<f64> = reports.iter().map(|r| r.task_losses[0]).collect();
    let regularizer = reports[0].regularizer;
    let lambda = state.config.lambda;
    let mut report = reports.pop().expect("at least two tasks");
    report.joint_loss = task_losses.iter().sum::<f64>() / task_losses.len() as f64 + lambda * regularizer;
    report.task_losses = task_losses;
    report.regularizer = regularizer;
    report.batch_sizes = batch.sizes();
    Ok(report)
}

/// One simultaneous step: a single backward pass at the current point, then
/// every group in `update` moves using those gradients.
pub fn train_step_with(
    state: &mut TrainState,
    batch: &MultiTaskBatch,
    update: UpdateSet,
) -> Result<StepReport, TrainError> {
    let step = state.step;
    let report = update_once(state, batch, update, step)?;
    state.step += 1;
    Ok(report)
}

fn update_once(
    state: &mut TrainState,
    batch: &MultiTaskBatch,
    update: UpdateSet,
    step: u64,
) -> Result<StepReport, TrainError> {
    let mode = state.train_mode(step);
    let ctx = state.relax_context(step);
    let mut g = Graph::new(mode);
    let built = build(&mut g, state, batch, update, &ctx).map_err(|e| numeric(step, e))?;
    let joint = g.scalar(built.joint);
    if !joint.is_finite() {
        return Err(TrainError::Numeric {
            step,
            detail: format!("joint loss is {joint}"),
        });
    }
    g.backward(built.joint)
        .map_err(|e| numeric(step, TrainError::from(e)))?;

    let lora_g = if update.lora { grads_of(&g, &built.lora) } else { Vec::new() };
    let gen_g = if update.prefix { grads_of(&g, &built.generator) } else { Vec::new() };
    let alpha_g = if update.alpha { grads_of(&g, &built.alpha) } else { Vec::new() };
    let (nl, np, na) = (sq_norm(&lora_g), sq_norm(&gen_g), sq_norm(&alpha_g));
    let total = (nl + np + na).sqrt();
    if !total.is_finite() {
        return Err(TrainError::Numeric {
            step,
            detail: "gradient norm is not finite".into(),
        });
    }
    let clip = match state.config.grad_clip {
        Some(c) if total > c => c / total,
        _ => 1.0,
    };
    let scaled = |groups: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        if clip == 1.0 {
            groups
        } else {
            groups.into_iter().map(|v| v.into_iter().map(|x| x * clip).collect()).collect()
        }
    };
    let (lora_g, gen_g, alpha_g) = (scaled(lora_g), scaled(gen_g), scaled(alpha_g));
    let lr = state.config.step_lr(state.horizon);

    let theta_before = (update.lora || update.prefix) && !alpha_g.is_empty();
    let lipschitz_due = state.config.lipschitz_every > 0 && step % state.config.lipschitz_every as u64 == 0;
    let snapshot = (lipschitz_due && theta_before).then(|| theta_vector(state, update));

    if !lora_g.is_empty() {
        apply(&mut state.optimizer, &mut state.adapters, &lora_g, lr);
    }
    if !gen_g.is_empty() {
        apply(&mut state.optimizer, &mut state.generator, &gen_g, lr);
    }

    let cross_lipschitz = match snapshot {
        Some(before) => {
            let after = theta_vector(state, update);
            let dtheta: f64 = before.iter().zip(&after).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dtheta == 0.0 {
                Some(0.0)
            } else {
                let mut g2 = Graph::new(mode);
                let only_alpha = UpdateSet {
                    lora: false,
                    prefix: false,
                    alpha: true,
                };
                let b2 = build(&mut g2, state, batch, only_alpha, &ctx).map_err(|e| numeric(step, e))?;
                g2.backward(b2.joint).map_err(|e| numeric(step, TrainError::from(e)))?;
                // Unclipped gradients on both sides of the ratio.
                let new_alpha = grads_of(&g2, &b2.alpha);
                let old_alpha = grads_of(&g, &built.alpha);
                let dg: f64 = old_alpha
                    .iter()
                    .flatten()
                    .zip(new_alpha.iter().flatten())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                Some(dg / dtheta)
            }
        }
        None => None,
    };

    if !alpha_g.is_empty() {
        apply(&mut state.optimizer, &mut state.alpha, &alpha_g, lr);
        if state.alpha.parameterization == Parameterization::Simplex {
            for row in &mut state.alpha.rows {
                let p = project_simplex(row.data());
                row.data_mut().copy_from_slice(&p);
            }
        }
    }

    let alpha = state.alpha.flat();
    Ok(StepReport {
        step,
        epoch: 0,
        task_losses: built.tasks.iter().map(|&t| g.scalar(t)).collect(),
        regularizer: built.reg.map_or(0.0, |r| g.scalar(r)),
        lambda: state.config.lambda,
        joint_loss: joint,
        grad_norm: total,
        grad_norm_lora: nl.sqrt(),
        grad_norm_prefix: np.sqrt(),
        grad_norm_alpha: na.sqrt(),
        alpha_variance: variance(&alpha),
        alpha,
        lr,
        cross_lipschitz,
        batch_sizes: batch.sizes(),
    })
}

fn theta_vector(state: &TrainState, update: UpdateSet) -> Vec<f64> {
    let mut out = Vec::new();
    if update.lora {
        out.extend(state.adapters.named().into_iter().flat_map(|(_, t)| t.data().to_vec()));
    }
    if update.prefix {
        out.extend(state.generator.named().into_iter().flat_map(|(_, t)| t.data().to_vec()));
    }
    out
}
