use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_advgauntlet"));
    c.env("RUST_LOG", "warn").env_remove("ADVGAUNTLET_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SPEC: &str = r#"{"n_malware": 120, "n_benign": 120, "string_vocab": 300, "api_vocab": 40,
 "param_value_vocab": 50, "n_informative": 15}"#;

const CONFIG: &str = r#"{
  "corpus": {"n_malware": 100, "n_benign": 100, "string_vocab": 300, "api_vocab": 40,
             "param_value_vocab": 50, "n_informative": 15},
  "feature_count": 120, "hidden_counts": [1], "hidden_dim": 10,
  "train": {"projected_dim": 20, "max_epochs": 10},
  "defenses": ["none", "distill:T=2"],
  "budget": 4, "attack_samples": 10,
  "output_dir": "unused"
}"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stage_by_stage_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    let corpus = d.join("corpus.jsonl");
    let data = d.join("data");
    let model = d.join("m.model");

    let out = run(&["gen-corpus", "--spec", s(&d.join("spec.json")), "--out", s(&corpus)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["extract", "--corpus", s(&corpus), "--k", "100", "--out", s(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["vocab.tsv", "train.tsv", "valid.tsv", "test.tsv"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let out = run(&[
        "train",
        "--data",
        s(&data),
        "--arch",
        "H=2,dim=8",
        "--defense",
        "decay:D=0.001",
        "--projected-dim",
        "16",
        "--max-epochs",
        "8",
        "--out",
        s(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&model).unwrap();
    assert!(text.starts_with("advgauntlet-model v1\n"));
    assert!(text.contains("defense=decay:D=0.001\n"));
    assert!(text.contains("train_seed=42\n"));
    let log = fs::read_to_string(d.join("m.model.log.csv")).unwrap();
    assert!(log.starts_with("epoch,step_size,train_loss,valid_error\n"));

    let out = run(&[
        "attack",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--budget",
        "3",
        "--samples",
        "5",
        "--strategies",
        "dec_pos,rand_inc_neg",
        "--out",
        s(&d.join("atk")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let success = fs::read_to_string(d.join("atk/success.csv")).unwrap();
    assert!(success.starts_with("strategy,iteration,success_rate\n"));
    assert_eq!(success.lines().count(), 1 + 2 * 3);

    let out = run(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        s(&data),
        "--out",
        s(&d.join("ev")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(d.join("ev/summary.csv")).unwrap();
    assert!(summary.contains("\nm,decay:D=0.001,2,"), "{summary}");
    assert!(fs::read_to_string(d.join("ev/roc.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn even_ensemble_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--data",
        s(dir.path()),
        "--defense",
        "ensemble:E=4",
        "--out",
        s(&dir.path().join("m")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("odd"));
}

#[test]
fn bad_flags_and_inputs_map_to_exit_codes() {
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.jsonl");
    let out = run(&["extract", "--corpus", s(&missing), "--out", s(dir.path())]);
    assert_eq!(code(&out), 5);

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"format\":\"advgauntlet-corpus\",\"version\":1}\nnot json\n").unwrap();
    let out = run(&["extract", "--corpus", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));
}

#[test]
fn run_honours_env_override_and_report_regenerates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, CONFIG).unwrap();
    let out_dir = dir.path().join("exp");
    let out = bin()
        .env("ADVGAUNTLET_OUT", &out_dir)
        .args(["run", "--config", s(&cfg)])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"master_seed\": 42"));
    assert!(!dir.path().join("unused").exists());

    let summary = fs::read(out_dir.join("summary.csv")).unwrap();
    fs::remove_file(out_dir.join("summary.csv")).unwrap();
    let out = run(&["report", "--experiment", s(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(out_dir.join("summary.csv")).unwrap(), summary);
    let text = String::from_utf8(summary).unwrap();
    assert!(text.starts_with("model,defense,H,test_error_pct,tpr_at_1e-4\n"));
    assert!(text.contains("distill_T2_h1,distill:T=2,1,"));
    assert!(out_dir.join("report/success_at_budget.csv").exists());
    assert!(out_dir.join("report/roc_h1.svg").exists());
}
