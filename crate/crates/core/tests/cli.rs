use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[data]
path = "data/tiny.jsonl"
families = ["token_pattern", "order_sensitive"]
vocab_size = 32
seq_len = 6
train_size = 40
val_size = 20
test_size = 20

[model]
d_model = 8
n_heads = 2
n_blocks = 1
d_ff = 16

[base]
pretrain_steps = 5

[lora]
rank = 2

[search]
n_layers = 1
ops_per_layer = 3

[train]
max_epochs = 2
gamma = 0.25
prefix_len = 2

[hpo]
n_trials = 4
budget = 1

[hpo.sampler]
kind = "tpe"
n_startup = 2

[diagnose]
n_seeds = 5

[diagnose.grid]
n_layers = [1, 2]
block_repetition = [1]
prefix_length = [2]

[diagnose.convergence]
steps = 40
window = 10
c = 1.0
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_peml"));
        cmd.current_dir(self.dir.path())
            .env_remove("PEML_OUTPUT_DIR")
            .env_remove("PEML_SEED")
            .args(["--config", "tiny.toml"])
            .args(args);
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn ready(&self) -> &Self {
        let out = self.run(&["gen-data"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        self
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_refuses_to_overwrite() {
    let ws = Workspace::new();
    ws.ready();
    let before = read(&ws.path("data/tiny.jsonl"));
    let again = ws.run(&["gen-data"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"));
    assert_eq!(read(&ws.path("data/tiny.jsonl")), before);
    let forced = ws.run(&["gen-data", "--force"]);
    assert_eq!(forced.status.code(), Some(0));
    assert_eq!(read(&ws.path("data/tiny.jsonl")), before);
}

#[test]
fn bad_config_names_the_field() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_peml"))
        .current_dir(ws.dir.path())
        .args(["--config", "bad.toml", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));

    fs::write(ws.path("bad.toml"), "[train]\ngamma = 2.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_peml"))
        .current_dir(ws.dir.path())
        .args(["--config", "bad.toml", "gen-data"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("gamma"), "{}", stderr(&out));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let ws = Workspace::new();
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("data/tiny.jsonl"), "{}", stderr(&out));
}

#[test]
fn train_is_byte_reproducible() {
    let ws = Workspace::new();
    ws.ready();
    let a = ws.run(&["train", "--output-dir", "a"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = ws.run(&["train", "--output-dir", "b"]);
    assert_eq!(b.status.code(), Some(0));
    for f in ["history.csv", "checkpoint.json", "architecture.json", "summary.json"] {
        assert_eq!(read(&ws.path(&format!("a/train/{f}"))), read(&ws.path(&format!("b/train/{f}"))), "{f}");
    }
    let c = ws.run(&["train", "--output-dir", "c", "--seed", "4"]);
    assert_eq!(c.status.code(), Some(0));
    assert_ne!(read(&ws.path("a/train/history.csv")), read(&ws.path("c/train/history.csv")));
}

#[test]
fn environment_overrides_output_dir_and_seed() {
    let ws = Workspace::new();
    ws.ready();
    let a = ws.run_env(&["train"], &[("PEML_OUTPUT_DIR", "env_out"), ("PEML_SEED", "4")]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    let b = ws.run(&["train", "--output-dir", "flag_out", "--seed", "4"]);
    assert_eq!(b.status.code(), Some(0));
    assert_eq!(read(&ws.path("env_out/train/history.csv")), read(&ws.path("flag_out/train/history.csv")));
    let bad = ws.run_env(&["train"], &[("PEML_SEED", "minus one")]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ablation_modes_disable_the_other_component() {
    let ws = Workspace::new();
    ws.ready();
    for mode in ["lora-only", "prefix-only"] {
        let out = ws.run(&["train", "--mode", mode, "--output-dir", mode]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        let summary: serde_json::Value = serde_json::from_slice(&read(&ws.path(&format!("{mode}/train/summary.json")))).unwrap();
        assert_eq!(summary["mode"], mode);
    }
    let lora: serde_json::Value = serde_json::from_slice(&read(&ws.path("lora-only/train/checkpoint.json"))).unwrap();
    assert_eq!(lora["generator"]["prefix_len"], 0);
    let joint = ws.run(&["train", "--output-dir", "joint"]);
    assert_eq!(joint.status.code(), Some(0));
    let j: serde_json::Value = serde_json::from_slice(&read(&ws.path("joint/train/summary.json"))).unwrap();
    let p: serde_json::Value = serde_json::from_slice(&read(&ws.path("prefix-only/train/summary.json"))).unwrap();
    let l: serde_json::Value = serde_json::from_slice(&read(&ws.path("lora-only/train/summary.json"))).unwrap();
    let count = |v: &serde_json::Value| v["trainable_params"].as_u64().unwrap();
    assert_eq!(count(&j), count(&p) + count(&l));
}

#[test]
fn search_keeps_adapters_frozen() {
    let ws = Workspace::new();
    ws.ready();
    let out = ws.run(&["search"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let s: serde_json::Value = serde_json::from_slice(&read(&ws.path("runs/search/summary.json"))).unwrap();
    let p = ws.run(&["train", "--mode", "prefix-only", "--output-dir", "p"]);
    assert_eq!(p.status.code(), Some(0));
    let ps: serde_json::Value = serde_json::from_slice(&read(&ws.path("p/train/summary.json"))).unwrap();
    assert_eq!(s["trainable_params"], ps["trainable_params"]);
}

#[test]
fn eval_and_export_read_the_checkpoint() {
    let ws = Workspace::new();
    ws.ready();
    assert_eq!(ws.run(&["train"]).status.code(), Some(0));
    let out = ws.run(&["eval", "--checkpoint", "runs/train/checkpoint.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let summary: serde_json::Value = serde_json::from_slice(&read(&ws.path("runs/train/summary.json"))).unwrap();
    assert_eq!(report["scores"], summary["final_val_scores"]);
    let test = ws.run(&["eval", "--checkpoint", "runs/train/checkpoint.json", "--split", "test"]);
    assert_eq!(test.status.code(), Some(0));

    let arch = ws.run(&["export-arch", "--checkpoint", "runs/train/checkpoint.json", "--out", "arch.json"]);
    assert_eq!(arch.status.code(), Some(0));
    let a: serde_json::Value = serde_json::from_slice(&read(&ws.path("arch.json"))).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&read(&ws.path("runs/train/architecture.json"))).unwrap();
    assert_eq!(a["layers"][0]["op_id"], b["layers"][0]["op_id"]);

    let missing = ws.run(&["eval", "--checkpoint", "nope.json"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn hpo_honors_trials_and_resumes() {
    let ws = Workspace::new();
    ws.ready();
    let straight = ws.run(&["hpo", "--output-dir", "straight"]);
    assert_eq!(straight.status.code(), Some(0), "{}", stderr(&straight));
    let trials = fs::read_to_string(ws.path("straight/hpo/trials.jsonl")).unwrap();
    assert_eq!(trials.lines().count(), 4);

    let first = ws.run(&["hpo", "--output-dir", "resumed", "--trials", "2"]);
    assert_eq!(first.status.code(), Some(0));
    let second = ws.run(&["hpo", "--output-dir", "resumed"]);
    assert_eq!(second.status.code(), Some(0), "{}", stderr(&second));
    for f in ["trials.jsonl", "leaderboard.csv", "best.json", "best_checkpoint.json"] {
        assert_eq!(read(&ws.path(&format!("straight/hpo/{f}"))), read(&ws.path(&format!("resumed/hpo/{f}"))), "{f}");
    }
}

#[test]
fn hpo_rejects_invalid_space() {
    let ws = Workspace::new();
    ws.ready();
    let cfg = format!(
        "{TINY}\n[[hpo.space.dims]]\nname = \"lr\"\n[hpo.space.dims.kind]\ntype = \"float\"\nlow = 0.1\nhigh = 0.01\nscale = \"log\"\n"
    );
    fs::write(ws.path("bad_space.toml"), cfg).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_peml"))
        .current_dir(ws.dir.path())
        .args(["--config", "bad_space.toml", "hpo"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("lr"));
}

#[test]
fn latency_diagnostic_prints_the_model() {
    let ws = Workspace::new();
    let out = ws.run(&["diagnose", "latency", "--tf", "11", "--ts", "2.1", "--n", "100", "--output-dir", "o"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("multi-adapter: 1310 ms"), "{text}");
    assert!(text.contains("unified: 1100 ms"), "{text}");
    assert!(text.contains("reduction: 16.0%"), "{text}");
    assert!(ws.path("o/diagnostics/latency.csv").exists());
    assert!(ws.path("o/diagnostics/latency.json").exists());
}

#[test]
fn unknown_diagnostic_lists_valid_names() {
    let ws = Workspace::new();
    let out = ws.run(&["diagnose", "vibes"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    for name in ["relaxation", "overhead", "latency", "sensitivity", "convergence"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn training_diagnostics_write_reports() {
    let ws = Workspace::new();
    ws.ready();
    for (which, file) in [
        ("overhead", "overhead.csv"),
        ("convergence", "convergence.json"),
        ("sensitivity", "sensitivity.csv"),
        ("relaxation", "relaxation_series.csv"),
    ] {
        let out = ws.run(&["diagnose", which]);
        assert_eq!(out.status.code(), Some(0), "{which}: {}", stderr(&out));
        assert!(ws.path(&format!("runs/diagnostics/{file}")).exists(), "{which}");
        assert!(stdout(&out).contains("report: "), "{which}");
    }
}
