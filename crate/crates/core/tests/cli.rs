//! The `plaindet` binary end to end on tiny configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plaindet::config::ExperimentConfig;

fn plaindet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plaindet")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("{}\n{extra}", ExperimentConfig::tiny().to_ini())).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_a_deterministic_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.ini", "");
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = plaindet(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert!(o.status.success(), "{}", text(&o));
        for f in ["checkpoint.bin", "trace.csv", "trace.jsonl", "config.ini"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
        traces.push(fs::read_to_string(out.join("trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
    assert!(traces[0].starts_with("epoch,"));

    let o = plaindet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("c")), "--seed", "9"]);
    assert!(o.status.success());
    assert_ne!(fs::read_to_string(dir.path().join("c/trace.csv")).unwrap(), traces[0]);
}

#[test]
fn invalid_placement_names_both_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.ini", "[backbone]\ndepth = 10\nprop_count = 4\nprop_placement = evenly\n");
    for cmd in ["train", "ablate", "bench"] {
        let o = plaindet(&[cmd, "--config", s(&cfg), "--out", s(&dir.path().join(cmd))]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", text(&o));
        let msg = text(&o);
        assert!(msg.contains("backbone.depth") && msg.contains("backbone.prop_count"), "{cmd}: {msg}");
    }
}

#[test]
fn unknown_keys_and_missing_files_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "typo.ini", "[train]\nbase_lrr = 0.1\n");
    let o = plaindet(&["train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("base_lrr"), "{}", text(&o));
    let o = plaindet(&["train", "--config", s(&dir.path().join("absent.ini"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = plaindet(&["gradcheck", "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("max rel err"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(!report["rows"].as_array().unwrap().is_empty());

    let o = plaindet(&["gradcheck", "--tol", "1e-12"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let o = plaindet(&["gradcheck", "--corrupt-backward"]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn gen_data_then_eval_on_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(dir.path(), "tiny.ini", "");
    let o = plaindet(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(data.join("train").is_dir() && data.join("val").is_dir());

    let snap = write_config(dir.path(), "snap.ini", &format!("[data]\nsource = snapshot\npath = {}\n", s(&data)));
    let run = dir.path().join("run");
    let o = plaindet(&["train", "--config", s(&snap), "--out", s(&run)]);
    assert!(o.status.success(), "{}", text(&o));

    let eval = dir.path().join("eval");
    let ck = run.join("checkpoint.bin");
    let o = plaindet(&["eval", "--checkpoint", s(&ck), "--config", s(&snap), "--out", s(&eval)]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["metrics.json", "metrics.csv", "detections.json"] {
        assert!(eval.join(f).exists(), "missing {f}");
    }
    // Snapshot and in-memory synthesis of the same seed give the same metrics.
    let o2 = plaindet(&["eval", "--checkpoint", s(&ck), "--config", s(&cfg)]);
    assert!(o2.status.success());
    let line = |o: &Output| String::from_utf8_lossy(&o.stdout).lines().find(|l| l.starts_with("AP ")).unwrap().to_string();
    assert_eq!(line(&o), line(&o2));
}

#[test]
fn eval_rejects_a_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("bad.bin");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let o = plaindet(&["eval", "--checkpoint", s(&ck)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("checkpoint"), "{}", text(&o));
}

#[test]
fn ablate_needs_cells_and_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write_config(dir.path(), "empty.ini", "[grid]\npyramids =\npropagation = none\n");
    let o = plaindet(&["ablate", "--config", s(&empty)]);
    assert_ne!(o.status.code(), Some(0));
    assert!(text(&o).contains("no cells"), "{}", text(&o));
    let o = plaindet(&["ablate", "--config", s(&write_config(dir.path(), "nogrid.ini", ""))]);
    assert!(text(&o).contains("no cells"), "{}", text(&o));

    let grid = write_config(dir.path(), "grid.ini", "[grid]\npyramids = none,simple\npropagation = none\nseeds = 0\n");
    let out = dir.path().join("abl");
    let o = plaindet(&["ablate", "--config", s(&grid), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("none/none,"));
    assert!(out.join("ablation_seeds.csv").exists() && out.join("ablation.txt").exists());
    assert!(out.join("cells/simple__none/seed0/trace.csv").exists());
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.ini", "");
    let o = plaindet(&["bench", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("strategy,median_ms,multiplier"));
    assert_eq!(csv.lines().count(), 5, "{csv}");
}
