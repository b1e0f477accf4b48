use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{CliError, Diagnostic, RunConfig, SplitArg};
use crate::data::{generate_tasks, load_collection, save_collection, Split, TaskCollection, TaskKind};
use crate::diagnostics::{
    param_overhead, relaxation_comparison, sensitivity_sweep, switching_latency_model, write_json, write_latency_csv,
    write_overhead_csv, write_relaxation_runs_csv, write_relaxation_series_csv, write_relaxation_summary_csv,
    write_sensitivity_csv, RunSetup,
};
use crate::hpo::{evaluate_trial, hpo_run, open_store, write_leaderboard_csv, InnerSetup};
use crate::model::{BaseWeights, Checkpoint, MergedModel};
use crate::prefixnas::{export_architecture, RelaxContext};
use crate::rng::{substream, substream_seed};
use crate::trainer::{
    convergence_metrics, evaluate, evaluate_merged, model_config_for, pretrain_base, train_loop, write_history_csv,
    PretrainConfig, TrainConfig, TrainState,
};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    let f = File::create(path).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(BufWriter::new(f))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_json(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn out_dir(cfg: &RunConfig, sub: &str) -> PathBuf {
    cfg.output_dir.join(sub)
}

fn load_data(cfg: &RunConfig) -> Result<TaskCollection, CliError> {
    let path = &cfg.data.path;
    if !path.exists() {
        return Err(CliError::Config(format!(
            "dataset {} not found; run gen-data first",
            path.display()
        )));
    }
    Ok(load_collection(path)?)
}

/// The frozen base: pretrained on a sibling collection (same specs, its own
/// seed) so it carries generic but mismatched task knowledge.
pub(crate) fn build_base(cfg: &RunConfig, data: &TaskCollection) -> Result<BaseWeights, CliError> {
    let m = &cfg.model;
    let model = model_config_for(data, m.d_model, m.n_heads, m.n_blocks, m.d_ff);
    if cfg.base.pretrain_steps == 0 {
        return Ok(BaseWeights::init(&model, &mut substream(cfg.seed, "base-init", &[]))?);
    }
    let sibling = generate_tasks(&data.specs(), substream_seed(cfg.seed, "base-data", &[]))?;
    let pre = PretrainConfig {
        steps: cfg.base.pretrain_steps,
        lr: cfg.base.lr,
        gamma: cfg.base.gamma,
        seed: substream_seed(cfg.seed, "base", &[]),
    };
    Ok(pretrain_base(&model, &sibling, &pre)?)
}

pub(crate) fn gen_data(cfg: &RunConfig, dest: Option<&Path>, force: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let path = dest.unwrap_or(&cfg.data.path);
    if path.exists() && !force {
        return Err(CliError::Refused(format!("{} exists; pass --force to overwrite", path.display())));
    }
    let data = generate_tasks(&cfg.data.specs(), substream_seed(cfg.seed, "data", &[]))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_collection(&data, path)?;
    writeln!(out, "wrote {} tasks to {}", data.n_tasks(), path.display())?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    mode: &'a str,
    epochs: usize,
    best_epoch: Option<usize>,
    stopped_early: bool,
    trainable_params: usize,
    final_val_scores: &'a [f64],
    final_val_macro: f64,
}

pub(crate) fn train(cfg: &RunConfig, search_only: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let base = build_base(cfg, &data)?;
    let train = TrainConfig {
        freeze_lora: search_only || cfg.train.freeze_lora,
        ..cfg.train_config()
    };
    let result = train_loop(base, &cfg.lora, &cfg.search, &train, &data)?;
    let dir = out_dir(cfg, if search_only { "search" } else { "train" });
    std::fs::create_dir_all(&dir)?;
    let checkpoint = dir.join("checkpoint.json");
    result.merged.to_checkpoint().save(&checkpoint)?;
    write_json_file(&dir.join("architecture.json"), &result.architecture)?;
    let history = dir.join("history.csv");
    let mut w = create(&history)?;
    write_history_csv(&mut w, &result.history)?;
    w.flush()?;
    write_json_file(&dir.join("epochs.json"), &result.epochs)?;
    write_json_file(
        &dir.join("summary.json"),
        &TrainSummary {
            mode: train.mode.name(),
            epochs: result.epochs.len(),
            best_epoch: result.best_epoch,
            stopped_early: result.stopped_early,
            trainable_params: result.trainable_params,
            final_val_scores: &result.final_val_scores,
            final_val_macro: result.final_val_macro,
        },
    )?;
    writeln!(
        out,
        "{} finished after {} epochs; validation macro score {:.4}",
        train.mode.name(),
        result.epochs.len(),
        result.final_val_macro
    )?;
    writeln!(out, "checkpoint: {}", checkpoint.display())?;
    writeln!(out, "history: {}", history.display())?;
    Ok(())
}

pub(crate) fn hpo(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let base = build_base(cfg, &data)?;
    let setup = InnerSetup {
        base: &base,
        data: &data,
        lora: cfg.lora.clone(),
        space: cfg.search.clone(),
        train: cfg.train_config(),
        budget: cfg.hpo.budget,
    };
    let dir = out_dir(cfg, "hpo");
    std::fs::create_dir_all(&dir)?;
    let mut store = open_store(&dir.join("trials.jsonl"), &cfg.hpo.space)?;
    if store.records().len() > cfg.hpo.n_trials {
        return Err(CliError::Config(format!(
            "trial store already holds {} trials, more than n_trials = {}",
            store.records().len(),
            cfg.hpo.n_trials
        )));
    }
    let result = hpo_run(&cfg.hpo.space, &cfg.hpo.sampler, cfg.hpo.n_trials, cfg.seed, Some(&mut store), |h| {
        evaluate_trial(&setup, h).map_err(|e| e.to_string())
    })?;
    // A best trial loaded from an earlier session is re-run to rebuild its
    // checkpoint; inner runs are deterministic.
    let best_checkpoint = match result.best_checkpoint {
        Some(c) => c,
        None => evaluate_trial(&setup, &result.best.params)?
            .checkpoint
            .ok_or_else(|| CliError::Runtime("best trial produced no checkpoint".into()))?,
    };
    let leaderboard = dir.join("leaderboard.csv");
    let mut w = create(&leaderboard)?;
    write_leaderboard_csv(&mut w, &result.leaderboard)?;
    w.flush()?;
    write_json_file(&dir.join("best.json"), &result.best)?;
    best_checkpoint.save(&dir.join("best_checkpoint.json"))?;
    writeln!(
        out,
        "{} trials, best #{} score {:.4} with {:?}",
        result.trials.len(),
        result.best.id,
        result.best.score.unwrap_or(f64::NAN),
        result.best.params
    )?;
    writeln!(out, "leaderboard: {}", leaderboard.display())?;
    Ok(())
}

fn run_setup<'a>(cfg: &RunConfig, base: &'a BaseWeights, data: &'a TaskCollection) -> RunSetup<'a> {
    RunSetup {
        base,
        data,
        lora: cfg.lora.clone(),
        space: cfg.search.clone(),
        train: cfg.train_config(),
    }
}

pub(crate) fn diagnose(cfg: &RunConfig, which: Diagnostic, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = cfg.output_dir.join("diagnostics");
    let mut written: Vec<PathBuf> = Vec::new();
    let mut csv_file = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> Result<(), CliError>| -> Result<(), CliError> {
        let path = dir.join(name);
        let mut w = create(&path)?;
        f(&mut w)?;
        w.flush()?;
        written.push(path);
        Ok(())
    };
    match which {
        Diagnostic::Latency => {
            let l = cfg.diagnose.latency;
            let r = switching_latency_model(l.t_forward_ms, l.t_switch_ms, l.n_tasks)?;
            writeln!(out, "multi-adapter: {} ms", r.multi_adapter_ms)?;
            writeln!(out, "unified: {} ms", r.unified_ms)?;
            writeln!(out, "reduction: {:.1}%", r.reduction_pct)?;
            csv_file("latency.csv", &|w| Ok(write_latency_csv(w, &r)?))?;
            csv_file("latency.json", &|w| Ok(write_json(w, &r)?))?;
        }
        Diagnostic::Overhead => {
            let data = load_data(cfg)?;
            let m = &cfg.model;
            let model = model_config_for(&data, m.d_model, m.n_heads, m.n_blocks, m.d_ff);
            let kinds: Vec<TaskKind> = data.tasks.iter().map(|t| t.spec.kind).collect();
            let base = BaseWeights::init(&model, &mut substream(cfg.seed, "base-init", &[]))?;
            let state = TrainState::new(base, &cfg.lora, &cfg.search, cfg.train_config(), kinds)?;
            let uses_prefix = state.config.mode.uses_prefix();
            let r = param_overhead(&state.base, &state.adapters, uses_prefix.then_some(&state.generator));
            writeln!(
                out,
                "base {} | lora {} | prefix generator {} | ratio {:.4}",
                r.base_params, r.lora_params, r.prefix_params, r.ratio
            )?;
            csv_file("overhead.csv", &|w| Ok(write_overhead_csv(w, &r)?))?;
            csv_file("overhead.json", &|w| Ok(write_json(w, &r)?))?;
        }
        Diagnostic::Relaxation => {
            let data = load_data(cfg)?;
            let base = build_base(cfg, &data)?;
            let r = relaxation_comparison(&run_setup(cfg, &base, &data), &cfg.diagnose.strategies, &cfg.seeds())?;
            for s in &r.summaries {
                writeln!(
                    out,
                    "{}: alpha grad norm {:.4} ± {:.4}, alpha variance {:.3e}, val {:.4}, loss gap {:.4}",
                    s.strategy.name(),
                    s.grad_norm_mean,
                    s.grad_norm_std,
                    s.alpha_variance,
                    s.final_val_macro,
                    s.loss_gap
                )?;
            }
            csv_file("relaxation_summary.csv", &|w| Ok(write_relaxation_summary_csv(w, &r)?))?;
            csv_file("relaxation_runs.csv", &|w| Ok(write_relaxation_runs_csv(w, &r)?))?;
            csv_file("relaxation_series.csv", &|w| Ok(write_relaxation_series_csv(w, &r)?))?;
            csv_file("relaxation.json", &|w| Ok(write_json(w, &r)?))?;
        }
        Diagnostic::Sensitivity => {
            let data = load_data(cfg)?;
            let base = build_base(cfg, &data)?;
            let r = sensitivity_sweep(&run_setup(cfg, &base, &data), &cfg.diagnose.grid, &cfg.seeds())?;
            let (p, score) = r.best;
            writeln!(
                out,
                "best: n_layers {} block_repetition {} prefix_length {} (mean score {:.4})",
                p.n_layers, p.block_repetition, p.prefix_length, score
            )?;
            csv_file("sensitivity.csv", &|w| Ok(write_sensitivity_csv(w, &r)?))?;
            csv_file("sensitivity.json", &|w| Ok(write_json(w, &r)?))?;
        }
        Diagnostic::Convergence => {
            let data = load_data(cfg)?;
            let base = build_base(cfg, &data)?;
            let c = cfg.diagnose.convergence;
            let train = cfg.convergence_train_config();
            let result = train_loop(base, &cfg.lora, &cfg.search, &train, &data)?;
            let curve = convergence_metrics(&result.history, c.window)?;
            for (t, v) in &curve.at_windows {
                writeln!(out, "T = {t}: running mean squared gradient norm {v:.6}")?;
            }
            match curve.cross_lipschitz {
                Some(l) => writeln!(out, "cross-Lipschitz estimate {l:.6}")?,
                None => writeln!(out, "cross-Lipschitz estimate unavailable")?,
            }
            csv_file("convergence_history.csv", &|w| Ok(write_history_csv(w, &result.history)?))?;
            csv_file("convergence.json", &|w| Ok(write_json(w, &curve)?))?;
        }
    }
    for p in &written {
        writeln!(out, "report: {}", p.display())?;
    }
    Ok(())
}

fn checkpoint_scores(ck: &Checkpoint, data: &TaskCollection, split: Split) -> Result<Vec<f64>, CliError> {
    if ck.merged {
        let merged = MergedModel {
            base: ck.base.clone(),
            generator: ck.generator.clone(),
            alpha: ck.alpha.clone(),
        };
        return Ok(evaluate_merged(&merged, data, split)?);
    }
    let alpha = (!ck.generator.is_discretized()).then_some(&ck.alpha);
    let prefix = (ck.generator.prefix_len > 0)
        .then(|| ck.generator.prefix(alpha, &RelaxContext::default(), crate::autodiff::Mode::Eval))
        .transpose()?;
    let adapters = (!ck.adapters.is_empty()).then_some(&ck.adapters);
    Ok(evaluate(&ck.base, adapters, prefix.as_ref(), data, split)?)
}

#[derive(Serialize)]
struct EvalReport {
    split: &'static str,
    scores: Vec<f64>,
    macro_score: f64,
}

pub(crate) fn eval(cfg: &RunConfig, checkpoint: &Path, split: SplitArg, out: &mut dyn Write) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (split, name) = match split {
        SplitArg::Val => (Split::Val, "val"),
        SplitArg::Test => (Split::Test, "test"),
    };
    let scores = checkpoint_scores(&ck, &data, split)?;
    let macro_score = scores.iter().sum::<f64>() / scores.len() as f64;
    let report = EvalReport {
        split: name,
        scores,
        macro_score,
    };
    write_json(&mut *out, &report)?;
    Ok(())
}

pub(crate) fn export_arch(checkpoint: &Path, dest: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let arch = export_architecture(&ck.generator, &ck.alpha)?;
    match dest {
        Some(p) => {
            write_json_file(p, &arch)?;
            writeln!(out, "architecture: {}", p.display())?;
        }
        None => write_json(&mut *out, &arch)?,
    }
    Ok(())
}
