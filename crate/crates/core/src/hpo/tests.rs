use std::cell::Cell;

use proptest::prelude::{prop_assert, proptest, ProptestConfig};

use super::*;
use crate::data::{generate_tasks, specs_for, TaskFamily};
use crate::model::BaseWeights;
use crate::prefixnas::SearchSpace;
use crate::rng::substream;
use crate::trainer::model_config_for;

fn ks_distance(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn startup_suggestions_follow_the_prior() {
    let space = HpoSpace::default();
    let cfg = TpeConfig::default();
    let draws: Vec<Point> = (0..10_000)
        .map(|i| tpe_suggest(&[], &space, &cfg, &mut substream(3, "prior-test", &[i])).unwrap())
        .collect();
    let lr: Vec<f64> = draws.iter().map(|p| p["lr"]).collect();
    let ks = ks_distance(lr, |x| ((x / 1e-3).ln() / 20f64.ln()).clamp(0.0, 1.0));
    assert!(ks < 0.05, "lr KS {ks}");
    let lambda: Vec<f64> = draws.iter().map(|p| p["lambda"]).collect();
    let ks = ks_distance(lambda, |x| ((x / 1e-4).ln() / 1000f64.ln()).clamp(0.0, 1.0));
    assert!(ks < 0.05, "lambda KS {ks}");
    // Discrete uniform on 5..=50: compare against the continuous CDF at the
    // upper edge of each integer's bin.
    let len: Vec<f64> = draws.iter().map(|p| p["prefix_length"] + 0.5).collect();
    let ks = ks_distance(len, |x| ((x - 5.0 + 0.5) / 46.0).clamp(0.0, 1.0));
    assert!(ks < 0.05, "prefix_length KS {ks}");
}

fn completed(id: usize, params: Point, score: f64) -> TrialRecord {
    TrialRecord {
        id,
        params,
        status: TrialStatus::Completed,
        score: Some(score),
        architecture: None,
        error: None,
    }
}

fn history_of(space: &HpoSpace, n: usize, f: impl Fn(&Point) -> f64) -> Vec<TrialRecord> {
    (0..n)
        .map(|i| {
            let p = random_suggest(space, &mut substream(9, "h", &[i as u64])).unwrap();
            let s = f(&p);
            completed(i, p, s)
        })
        .collect()
}

#[test]
fn suggestions_are_deterministic_and_legal() {
    let space = HpoSpace::default();
    let hist = history_of(&space, 15, |p| -p["lr"].ln().abs());
    let cfg = TpeConfig::default();
    let a = tpe_suggest(&hist, &space, &cfg, &mut substream(1, "s", &[])).unwrap();
    let b = tpe_suggest(&hist, &space, &cfg, &mut substream(1, "s", &[])).unwrap();
    assert_eq!(a, b);
    assert!(space.contains(&a).is_ok(), "{a:?}");
    let grid = a["lr"] / 5e-5;
    assert!((grid - grid.round()).abs() < 1e-9);
}

#[test]
fn failed_trials_never_enter_the_fit() {
    let space = HpoSpace::lr_only();
    let cfg = TpeConfig::default();
    let hist = history_of(&space, 12, calibration_score);
    let mut with_failures = hist.clone();
    for i in 0..5 {
        let mut p = Point::new();
        p.insert("lr".into(), 1e-3);
        with_failures.push(TrialRecord {
            id: 12 + i,
            params: p,
            status: if i % 2 == 0 { TrialStatus::Failed } else { TrialStatus::Pruned },
            score: Some(1.0),
            architecture: None,
            error: Some("boom".into()),
        });
    }
    let a = tpe_suggest(&hist, &space, &cfg, &mut substream(2, "s", &[])).unwrap();
    let b = tpe_suggest(&with_failures, &space, &cfg, &mut substream(2, "s", &[])).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_space_is_a_config_error() {
    let empty = HpoSpace { dims: vec![] };
    assert!(matches!(
        tpe_suggest(&[], &empty, &TpeConfig::default(), &mut substream(0, "x", &[])),
        Err(HpoError::Config(_))
    ));
    let dup = HpoSpace {
        dims: vec![Dimension::int("a", 0, 1), Dimension::int("a", 0, 1)],
    };
    assert!(dup.validate().is_err());
    let bad_log = HpoSpace {
        dims: vec![Dimension::float("x", 0.0, 1.0, Scale::Log, None)],
    };
    assert!(bad_log.validate().is_err());
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn calibration_suggestions_concentrate_near_optimum() {
    let space = HpoSpace::lr_only();
    let sampler = Sampler::Tpe(TpeConfig::default());
    let next: Vec<f64> = (0..50)
        .map(|rep| {
            let run = hpo_run(&space, &sampler, 30, rep, None, |p| {
                Ok(TrialResult {
                    score: calibration_score(p),
                    architecture: None,
                    checkpoint: None,
                })
            })
            .unwrap();
            suggest(&sampler, &run.trials, &space, rep, 30).unwrap()["lr"]
        })
        .collect();
    let target = CALIBRATION_OPTIMUM.ln();
    let prior_median = (1e-3f64 * 2e-2).sqrt().ln();
    let tpe_median = median(next.clone()).ln();
    assert!(
        (tpe_median - target).abs() < (prior_median - target).abs(),
        "tpe median {} vs prior median {}",
        tpe_median.exp(),
        prior_median.exp()
    );
    let tpe_spread = median(next.iter().map(|v| (v.ln() - target).abs()).collect());
    let prior_spread = median(
        (0..50)
            .map(|i| (random_suggest(&space, &mut substream(4, "p", &[i])).unwrap()["lr"].ln() - target).abs())
            .collect(),
    );
    assert!(tpe_spread < prior_spread, "{tpe_spread} vs {prior_spread}");
}

#[test]
fn run_bookkeeping() {
    let space = HpoSpace::default();
    let sampler = Sampler::Tpe(TpeConfig::default());
    let score = |p: &Point| -> Result<TrialResult, String> {
        Ok(TrialResult {
            score: calibration_score(p) * (1.0 - p["lambda"]),
            architecture: None,
            checkpoint: None,
        })
    };
    let one = hpo_run(&space, &sampler, 1, 5, None, score).unwrap();
    assert_eq!(one.best, one.trials[0]);

    let run = hpo_run(&space, &sampler, 15, 5, None, score).unwrap();
    assert_eq!(run.leaderboard.len(), 15);
    assert!(run.leaderboard.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(run.best, run.leaderboard[0]);
    for t in &run.trials {
        assert!(space.contains(&t.params).is_ok());
    }

    let mut csv = Vec::new();
    write_leaderboard_csv(&mut csv, &run.leaderboard).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("rank,trial,score,lambda,lr,prefix_length\n"));
    assert_eq!(text.lines().count(), 16);

    let failing = |p: &Point| -> Result<TrialResult, String> {
        if p["lr"] < 5e-3 {
            Err("diverged".into())
        } else {
            score(p)
        }
    };
    let partial = hpo_run(&space, &sampler, 12, 5, None, failing).unwrap();
    assert!(partial.trials.iter().any(|t| t.status == TrialStatus::Failed));
    assert!(partial.leaderboard.iter().all(|t| t.status == TrialStatus::Completed));
    let none = hpo_run(&space, &sampler, 3, 5, None, |_| Err("no".to_string()));
    assert!(matches!(none, Err(HpoError::AllFailed(3))));
}

#[test]
fn store_resumes_without_rerunning() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trials.jsonl");
    let space = HpoSpace::default();
    let sampler = Sampler::Tpe(TpeConfig::default());
    let calls = Cell::new(0);
    let score = |p: &Point| -> Result<TrialResult, String> {
        calls.set(calls.get() + 1);
        Ok(TrialResult {
            score: calibration_score(p),
            architecture: None,
            checkpoint: None,
        })
    };
    let straight = hpo_run(&space, &sampler, 14, 8, None, score).unwrap();
    calls.set(0);

    let mut store = open_store(&path, &space).unwrap();
    hpo_run(&space, &sampler, 9, 8, Some(&mut store), score).unwrap();
    assert_eq!(calls.get(), 9);
    let mut store = open_store(&path, &space).unwrap();
    assert_eq!(store.records().len(), 9);
    let resumed = hpo_run(&space, &sampler, 14, 8, Some(&mut store), score).unwrap();
    assert_eq!(calls.get(), 14);
    assert_eq!(resumed.trials, straight.trials);
    assert_eq!(load_trials(&path).unwrap(), straight.trials);

    std::fs::write(&path, "{\"id\": 0, \"params\": {}}\n").unwrap();
    assert!(matches!(open_store(&path, &space), Err(HpoError::Store { line: 1, .. })));
}

#[test]
fn trial_scores_are_reproducible_and_chance_at_zero_budget() {
    let specs = specs_for(&[TaskFamily::TokenPattern, TaskFamily::OrderSensitive], 32, 8, (40, 200, 10));
    let mut chance = Vec::new();
    for seed in 0..4 {
        let data = generate_tasks(&specs, seed).unwrap();
        let base = BaseWeights::init(&model_config_for(&data, 8, 2, 1, 16), &mut substream(seed, "b", &[])).unwrap();
        let setup = InnerSetup {
            base: &base,
            data: &data,
            lora: crate::model::LoraConfig {
                rank: 2,
                ..Default::default()
            },
            space: SearchSpace {
                n_layers: 1,
                ops_per_layer: 2,
                ..SearchSpace::default()
            },
            train: crate::trainer::TrainConfig {
                seed,
                gamma: 0.5,
                ..Default::default()
            },
            budget: 0,
        };
        let mut h = Point::new();
        h.insert("lr".into(), 5e-3);
        h.insert("prefix_length".into(), 5.0);
        h.insert("lambda".into(), 1e-2);
        let a = evaluate_trial(&setup, &h).unwrap();
        chance.push(a.score);
        assert!((0.0..=1.0).contains(&a.score));
        if seed == 0 {
            let trained = InnerSetup { budget: 2, ..setup.clone() };
            let x = evaluate_trial(&trained, &h).unwrap();
            let y = evaluate_trial(&trained, &h).unwrap();
            assert_eq!(x.score, y.score);
            assert_eq!(x.checkpoint, y.checkpoint);
        }
    }
    let mean = chance.iter().sum::<f64>() / chance.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "untrained mean {mean} from {chance:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn every_suggestion_is_legal(seed in 0u64..10_000, n in 0usize..25) {
        let space = HpoSpace::default();
        let hist = history_of(&space, n, |p| (p["prefix_length"] / 50.0) * calibration_score(p));
        let p = tpe_suggest(&hist, &space, &TpeConfig::default(), &mut substream(seed, "prop", &[])).unwrap();
        prop_assert!(space.contains(&p).is_ok());
        prop_assert!(p["lr"] >= 1e-3 && p["lr"] <= 2e-2);
        prop_assert!(p["prefix_length"].fract() == 0.0);
    }
}
