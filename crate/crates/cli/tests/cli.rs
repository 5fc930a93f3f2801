use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
    "generator": { "n_videos": 40 },
    "train": { "epochs": 2, "steps_per_epoch": 3 },
    "fewshot": { "shots": 1, "episodes": 2 },
    "seeds": [0, 1],
    "variants": ["tac", "clap"]
}"#;

fn clapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clapt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = clapt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: tempfile::TempDir,
    config: PathBuf,
    corpus: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.json");
        std::fs::write(&config, TINY).unwrap();
        let corpus = dir.path().join("data/corpus.jsonl");
        ok(&["--config", s(&config), "gen-data", "--out", s(&corpus)]);
        Self { dir, config, corpus }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, objective: &str, base_only: bool) -> PathBuf {
        let out = self.path(&format!("{objective}{}", if base_only { "-base" } else { "" }));
        let mut args = vec!["--config", s(&self.config), "train", "--corpus", s(&self.corpus)];
        args.extend(["--objective", objective, "--out", s(&out)]);
        if base_only {
            args.push("--base-only");
        }
        ok(&args);
        out
    }

    fn eval(&self, command: &str, checkpoint: &Path, out: &Path) -> Output {
        clapt(&[
            "--config",
            s(&self.config),
            command,
            "--checkpoint",
            s(&checkpoint.join("checkpoint.json")),
            "--corpus",
            s(&self.corpus),
            "--out",
            s(out),
        ])
    }
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn log_steps(dir: &Path) -> Vec<Value> {
    std::fs::read_to_string(dir.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_is_deterministic_and_validated() {
    let ws = Workspace::new();
    let again = ws.path("again/corpus.jsonl");
    ok(&["--config", s(&ws.config), "gen-data", "--out", s(&again)]);
    for name in ["corpus.jsonl", "classes.json", "splits.json"] {
        let a = std::fs::read(ws.corpus.with_file_name(name)).unwrap();
        assert_eq!(a, std::fs::read(again.with_file_name(name)).unwrap(), "{name}");
    }
    let other = ws.path("other/corpus.jsonl");
    ok(&["--config", s(&ws.config), "gen-data", "--out", s(&other), "--seed", "8"]);
    assert_ne!(std::fs::read(&ws.corpus).unwrap(), std::fs::read(&other).unwrap());

    let bad = clapt(&["gen-data", "--out", s(&ws.path("bad.jsonl")), "--n-classes", "0"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn train_logs_the_terms_of_each_objective() {
    let ws = Workspace::new();
    let terms = |objective: &str| -> Vec<Value> { log_steps(&ws.train(objective, false)) };
    for step in terms("clap") {
        let (ce, mask, total) = (&step["l_ce"], &step["l_mask"], &step["l_total"]);
        assert!(ce.is_f64() && mask.is_f64());
        assert!((ce.as_f64().unwrap() + mask.as_f64().unwrap() - total.as_f64().unwrap()).abs() < 1e-12);
        assert!(step.get("l_clip").is_none_or(Value::is_null));
    }
    for step in terms("tac") {
        assert!(step["l_ce"].is_f64());
        for k in ["l_clip", "l_mask"] {
            assert!(step.get(k).is_none_or(Value::is_null));
        }
    }
    for step in terms("clap-no-cls") {
        assert!(step.get("l_ce").is_none_or(Value::is_null));
        assert!(step["l_mask"].is_f64());
    }
}

#[test]
fn evaluation_reports_carry_metrics_and_provenance() {
    let ws = Workspace::new();
    let ckpt = ws.train("clap", false);

    let tal = ws.path("reports/tal.json");
    let dets = ws.path("reports/dets.jsonl");
    let mut args = vec!["--config", s(&ws.config), "eval-tal"];
    let ckpt_file = ckpt.join("checkpoint.json");
    args.extend(["--checkpoint", s(&ckpt_file), "--corpus", s(&ws.corpus)]);
    args.extend(["--out", s(&tal), "--detections", s(&dets)]);
    ok(&args);
    let r = read_json(&tal);
    for k in ["mAP@0.5", "mAP@0.75", "mAP@0.95", "AmAP", "code_version", "config_hash"] {
        assert!(r.get(k).is_some(), "tal report lacks {k}");
    }
    assert!(std::fs::read_to_string(&dets).unwrap().lines().count() > 0);

    let g = ws.path("reports/grounding.json");
    assert!(ws.eval("eval-grounding", &ckpt, &g).status.success());
    let r = read_json(&g);
    for k in ["recall@0.5", "recall@0.7", "mIoU"] {
        assert!(r[k].is_f64(), "grounding report lacks {k}");
    }

    let a = ws.path("reports/analysis.json");
    assert!(ws.eval("analyze-features", &ckpt, &a).status.success());
    assert!(read_json(&a)["median_difference"].is_f64());
    let hist = std::fs::read_to_string(a.with_extension("csv")).unwrap();
    assert!(hist.lines().count() > 1);

    let features = ws.path("features.jsonl");
    ok(&["extract", "--checkpoint", s(&ckpt_file), "--corpus", s(&ws.corpus), "--out", s(&features)]);
    let tal2 = ws.path("reports/tal2.json");
    let mut args = vec!["--config", s(&ws.config), "eval-tal"];
    args.extend(["--checkpoint", s(&ckpt_file), "--corpus", s(&ws.corpus)]);
    args.extend(["--features", s(&features), "--out", s(&tal2)]);
    ok(&args);
    assert_eq!(read_json(&tal)["AmAP"], read_json(&tal2)["AmAP"]);
}

#[test]
fn fewshot_requires_a_base_only_checkpoint() {
    let ws = Workspace::new();
    let leaky = ws.train("clap", false);
    let out = ws.eval("eval-fewshot", &leaky, &ws.path("fs.json"));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("novel class"));

    let clean = ws.train("clap", true);
    let report = ws.path("fs.json");
    assert!(ws.eval("eval-fewshot", &clean, &report).status.success());
    let r = read_json(&report);
    assert!(r["mean"]["mAP@0.5"].is_f64());
    assert_eq!(r["episodes"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_inputs_are_named() {
    let ws = Workspace::new();
    let missing = ws.path("nowhere/checkpoint.json");
    let out = clapt(&[
        "eval-tal",
        "--checkpoint",
        s(&missing),
        "--corpus",
        s(&ws.corpus),
        "--out",
        s(&ws.path("x.json")),
    ]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));

    let absent_corpus = ws.path("absent.jsonl");
    let out = clapt(&["train", "--corpus", s(&absent_corpus), "--out", s(&ws.path("t"))]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&absent_corpus)));
}

#[test]
fn repro_ablation_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    std::fs::write(&config, TINY).unwrap();
    let run = |name: &str| -> String {
        let out = dir.path().join(name);
        ok(&["--config", s(&config), "repro-ablation", "--out", s(&out)]);
        assert!(out.join("ablation.json").exists());
        std::fs::read_to_string(out.join("ablation.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert!(a.starts_with("variant,task,seed,status,mAP@0.5"));
    assert_eq!(a.lines().count(), 1 + 12 + 12);
}

#[test]
fn print_config_shows_overrides() {
    let out = ok(&["--print-config", "repro-ablation", "--seeds", "3,4", "--variants", "clap,tac"]);
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seeds"], serde_json::json!([3, 4]));
    assert_eq!(cfg["variants"], serde_json::json!(["clap", "tac"]));
}
