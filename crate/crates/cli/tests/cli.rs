use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ranger_cli::selftest::TINY_CONFIG;

fn ranger(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ranger")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gen_data_refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = tmp.path().join("data");
    let first = ranger(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert!(first.status.success(), "{}", stderr(&first));
    let before = fs::read(out.join("manifest.json")).unwrap();

    let second = ranger(&["gen-data", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(second.status.code(), Some(1));
    assert!(stderr(&second).contains("--force"));

    let forced = ranger(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--force"]);
    assert!(forced.status.success());
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), before);
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn zero_experts_is_a_domain_error_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "model.experts = 0\n").unwrap();
    let o = ranger(&["train", "--config", s(&cfg), "--data", s(tmp.path()), "--out", s(&tmp.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("experts"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(ranger(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ranger(&["gen-data"]).status.code(), Some(2));
    assert_eq!(ranger(&["ablate", "--axis", "colour", "--out", "x"]).status.code(), Some(2));
}

#[test]
fn lambda_sweep_writes_four_runs_and_one_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = tmp.path().join("sweep");
    let o = ranger(&["ablate", "--config", s(&cfg), "--axis", "lambda", "--values", "0,0.001,0.01,0.1", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs = fs::read_dir(out.join("runs")).unwrap().count();
    assert_eq!(runs, 4);
    let table = fs::read_to_string(out.join("summary.md")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| λ=")).collect();
    assert_eq!(rows.len(), 4, "{table}");
    assert!(table.lines().next().unwrap().contains("ROUGE-L"));
}

#[test]
fn train_generate_evaluate_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let p = |n: &str| tmp.path().join(n);
    assert!(ranger(&["gen-data", "--config", s(&cfg), "--out", s(&p("data"))]).status.success());
    let t = ranger(&["train", "--config", s(&cfg), "--data", s(&p("data")), "--out", s(&p("run"))]);
    assert!(t.status.success(), "{}", stderr(&t));
    for f in ["checkpoint.bin", "last.bin", "bank.bin", "train_log.jsonl", "load_stats.jsonl", "epochs.jsonl", "run_manifest.json"] {
        assert!(p("run").join(f).exists(), "{f}");
    }
    let g = ranger(&[
        "generate",
        "--checkpoint",
        s(&p("run/checkpoint.bin")),
        "--data",
        s(&p("data")),
        "--beam",
        "2",
        "--out",
        s(&p("gen")),
    ]);
    assert!(g.status.success(), "{}", stderr(&g));
    let e = ranger(&["evaluate", "--generations", s(&p("gen/generations.jsonl")), "--data", s(&p("data")), "--out", s(&p("eval"))]);
    assert!(e.status.success(), "{}", stderr(&e));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("eval/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["cases"].as_array().unwrap().len(), 3);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("eval/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert_eq!(manifest["outputs"][0], "metrics.json");
}
