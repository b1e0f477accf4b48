use serde_json::Value;

use super::*;
use crate::data::{generate_tasks, specs_for, TaskFamily};
use crate::model::{LoraTargets, ModelConfig};
use crate::prefixnas::{ArchParams, Parameterization};
use crate::rng::substream;
use crate::trainer::model_config_for;

fn tiny() -> (BaseWeights, TaskCollection) {
    let specs = specs_for(&[TaskFamily::TokenPattern, TaskFamily::OrderSensitive], 32, 6, (60, 20, 20));
    let data = generate_tasks(&specs, 5).unwrap();
    let base = BaseWeights::init(&model_config_for(&data, 8, 2, 1, 16), &mut substream(2, "base", &[])).unwrap();
    (base, data)
}

fn setup<'a>(base: &'a BaseWeights, data: &'a TaskCollection) -> RunSetup<'a> {
    RunSetup {
        base,
        data,
        lora: LoraConfig {
            rank: 2,
            ..LoraConfig::default()
        },
        space: SearchSpace {
            n_layers: 1,
            ops_per_layer: 3,
            ..SearchSpace::default()
        },
        train: TrainConfig {
            prefix_len: 2,
            max_epochs: 2,
            gamma: 0.25,
            lr: 1e-2,
            ..TrainConfig::default()
        },
    }
}

/// Counts every number stored in a serialized tensor.
fn brute_count(v: &Value) -> usize {
    match v {
        Value::Object(m) if m.contains_key("shape") && m.contains_key("data") => m["data"].as_array().unwrap().len(),
        Value::Object(m) => m.values().map(brute_count).sum(),
        Value::Array(a) => a.iter().map(brute_count).sum(),
        _ => 0,
    }
}

#[test]
fn latency_model_values() {
    let r = switching_latency_model(11.0, 2.1, 100).unwrap();
    assert!((r.multi_adapter_ms - 1310.0).abs() < 1e-9, "{}", r.multi_adapter_ms);
    assert!((r.unified_ms - 1100.0).abs() < 1e-9);
    assert!((r.reduction_pct - 100.0 * 2.1 / 13.1).abs() < 1e-9);
    let r = switching_latency_model(52.0, 4.3, 100).unwrap();
    assert!((r.multi_adapter_ms - 5630.0).abs() < 1e-9);
    assert!((r.unified_ms - 5200.0).abs() < 1e-9);
    let r = switching_latency_model(7.5, 0.0, 3).unwrap();
    assert_eq!(r.multi_adapter_ms, r.unified_ms);
    assert_eq!(r.reduction_pct, 0.0);
}

#[test]
fn latency_model_is_linear_in_tasks() {
    let at = |n| switching_latency_model(3.25, 0.75, n).unwrap();
    let (a, b, c) = (at(1), at(8), at(64));
    for r in [a, b, c] {
        assert_eq!(r.multi_adapter_ms, r.n_tasks as f64 * 4.0);
        assert_eq!(r.unified_ms, r.n_tasks as f64 * 3.25);
    }
    assert_eq!(c.multi_adapter_ms - b.multi_adapter_ms, 56.0 * a.multi_adapter_ms);
    assert_eq!(a.reduction_pct, c.reduction_pct);
}

#[test]
fn latency_model_rejects_bad_inputs() {
    assert!(switching_latency_model(0.0, 1.0, 1).is_err());
    assert!(switching_latency_model(1.0, -0.1, 1).is_err());
    assert!(switching_latency_model(1.0, 0.1, 0).is_err());
    assert!(switching_latency_model(f64::NAN, 0.1, 1).is_err());
}

#[test]
fn overhead_counts_are_exact() {
    let (base, _) = tiny();
    let empty = param_overhead(&base, &LoraAdapters::default(), None);
    assert_eq!(empty.ratio, 0.0);
    assert_eq!(empty.base_params, brute_count(&serde_json::to_value(&base).unwrap()));

    let model = ModelConfig {
        d_model: 32,
        n_blocks: 1,
        ..ModelConfig::default()
    };
    let wide = BaseWeights::init(&model, &mut substream(0, "b", &[])).unwrap();
    let cfg = LoraConfig {
        rank: 4,
        targets: LoraTargets::KeyValue,
        ..LoraConfig::default()
    };
    let adapters = LoraAdapters::init(&cfg, &model, &mut substream(0, "l", &[])).unwrap();
    let space = SearchSpace {
        n_layers: 2,
        ops_per_layer: 3,
        ..SearchSpace::default()
    };
    let gen = PrefixGenerator::init(&space, 32, 1, 5, &mut substream(0, "g", &[])).unwrap();
    let r = param_overhead(&wide, &adapters, Some(&gen));
    assert_eq!(r.lora_params, 512);
    assert_eq!(r.lora_params, brute_count(&serde_json::to_value(&adapters).unwrap()));
    // Embedding, two mixed layers of three d×d ops with biases, output map.
    assert_eq!(r.prefix_params, 5 * 32 + 2 * 3 * (32 * 32 + 32) + 2 * 32 * 32 + 2 * 32);
    assert_eq!(r.prefix_params, brute_count(&serde_json::to_value(&gen).unwrap()));
    assert_eq!(r.ratio, (512 + r.prefix_params) as f64 / r.base_params as f64);

    let silent = PrefixGenerator::init(&space, 32, 1, 0, &mut substream(0, "g", &[])).unwrap();
    assert_eq!(param_overhead(&wide, &adapters, Some(&silent)).prefix_params, 0);
}

#[test]
fn relaxation_run_is_reproducible() {
    let (base, data) = tiny();
    let s = setup(&base, &data);
    let a = relaxation_run(&s, Strategy::Ste, 4).unwrap();
    let b = relaxation_run(&s, Strategy::Ste, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.grad_norm_series.len(), 2 * s.train.steps_per_epoch());
    assert!(a.grad_norm_std >= 0.0 && a.alpha_variance >= 0.0 && a.gap.loss_gap >= 0.0);
    assert!((a.grad_norm_std.powi(2) - a.grad_norm_var).abs() < 1e-12);
}

#[test]
fn relaxation_comparison_checks_its_inputs() {
    let (base, data) = tiny();
    let s = setup(&base, &data);
    assert!(matches!(
        relaxation_comparison(&s, &[Strategy::Softmax], &[0, 1, 2, 3, 4]),
        Err(DiagnosticsError::Config(_))
    ));
    assert!(matches!(
        relaxation_comparison(&s, &Strategy::ALL, &[0, 1, 2]),
        Err(DiagnosticsError::Config(_))
    ));
    let lora_only = RunSetup {
        train: TrainConfig {
            mode: crate::trainer::TrainMode::LoraOnly,
            ..s.train.clone()
        },
        ..s.clone()
    };
    assert!(relaxation_run(&lora_only, Strategy::Softmax, 0).is_err());
}

#[test]
fn relaxation_comparison_summarizes_runs() {
    let (base, data) = tiny();
    let mut s = setup(&base, &data);
    s.train.max_epochs = 1;
    let seeds = [0, 1, 2, 3, 4];
    let report = relaxation_comparison(&s, &[Strategy::Softmax, Strategy::Ste], &seeds).unwrap();
    assert_eq!(report.runs.len(), 10);
    let soft: Vec<f64> = seeds.iter().map(|&x| report.run(Strategy::Softmax, x).unwrap().grad_norm_mean).collect();
    let expect = soft.iter().sum::<f64>() / 5.0;
    assert!((report.summaries[0].grad_norm_mean - expect).abs() < 1e-12);
    assert_eq!(report.run(Strategy::Ste, 3).unwrap(), &relaxation_run(&s, Strategy::Ste, 3).unwrap());

    let mut buf = Vec::new();
    write_relaxation_series_csv(&mut buf, &report).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + 10 * s.train.steps_per_epoch());
    let mut buf = Vec::new();
    write_json(&mut buf, &report).unwrap();
    let back: RelaxationReport = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back.summaries, report.summaries);
}

#[test]
fn one_hot_alpha_has_no_gap() {
    let (base, data) = tiny();
    let s = setup(&base, &data);
    let config = TrainConfig {
        parameterization: Parameterization::Simplex,
        ..s.train.clone()
    };
    let mut state = TrainState::new(base.clone(), &s.lora, &s.space, config, s.kinds()).unwrap();
    state.alpha = ArchParams::from_rows(vec![vec![0.0, 1.0, 0.0]], Parameterization::Simplex).unwrap();
    let gap = discretization_gap(&state, &data, Split::Val).unwrap();
    assert_eq!(gap.loss_gap, 0.0);
    assert_eq!(gap.l1_per_layer, vec![0.0]);
}

#[test]
fn sensitivity_sweep_rows_and_argmax() {
    let (base, data) = tiny();
    let mut s = setup(&base, &data);
    s.train.max_epochs = 1;
    let single = SensitivityGrid {
        n_layers: vec![1],
        block_repetition: vec![1],
        prefix_length: vec![2],
    };
    let r = sensitivity_sweep(&s, &single, &[7]).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.best.1, r.rows[0].score);

    let grid = SensitivityGrid {
        n_layers: vec![1, 2],
        block_repetition: vec![1],
        prefix_length: vec![2, 3],
    };
    let a = sensitivity_sweep(&s, &grid, &[0, 1]).unwrap();
    let b = sensitivity_sweep(&s, &grid, &[0, 1]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 8);
    assert!(a.means.iter().all(|(_, m)| *m <= a.best.1));
    let mut buf = Vec::new();
    write_sensitivity_csv(&mut buf, &a).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("n_layers,block_repetition,prefix_length,seed,score\n"));

    let empty = SensitivityGrid {
        prefix_length: vec![],
        ..grid
    };
    assert!(matches!(sensitivity_sweep(&s, &empty, &[0]), Err(DiagnosticsError::Config(_))));
}
