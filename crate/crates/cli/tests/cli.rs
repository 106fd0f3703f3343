use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tshn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tshn"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TSHN_SEED")
        .output()
        .expect("spawn tshn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--classes",
    "4",
    "--per-class",
    "12",
    "--snrs",
    "10,18",
    "--sample-len",
    "64",
    "--episodes",
    "6",
    "--epochs",
    "1",
    "--trusted-per-class",
    "3",
];

fn train(dir: &Path, name: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--name", name, "--out-dir", "runs", "--seed", "1"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    tshn(&args, dir)
}

#[test]
fn synth_creates_missing_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tshn(&["synth", "--classes", "3", "--per-class", "4", "--snrs", "0,10", "--seed", "7", "-o", "a/b/data"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("a/b/data");
    assert!(out.read_dir().unwrap().count() >= 2);
    let manifest: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(manifest["total_records"], 24);
}

#[test]
fn invalid_class_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tshn(&["synth", "--classes", "BPSK,OOK", "-o", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("OOK"));
}

#[test]
fn bad_flags_and_config_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tshn(&["train", "--noise", "sym"], tmp.path()).status.code(), Some(2));
    assert_eq!(tshn(&["train", "--mvs", "N=x"], tmp.path()).status.code(), Some(2));
    assert_eq!(tshn(&["train", "--method", "svm"], tmp.path()).status.code(), Some(2));
    fs::write(tmp.path().join("c.toml"), "[train]\nbogus = 1\n").unwrap();
    assert_eq!(tshn(&["train", "-c", "c.toml"], tmp.path()).status.code(), Some(2));
    assert_eq!(tshn(&["frobnicate"], tmp.path()).status.code(), Some(2));
}

#[test]
fn glc_without_trusted_samples_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tshn(
        &["train", "--method", "glc", "--classes", "4", "--per-class", "12", "--snrs", "10", "--trusted-frac", "0.001"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("trusted"));
    assert!(!tmp.path().join("runs").exists(), "no compute before validation");
}

#[test]
fn train_writes_run_dir_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(tmp.path(), "a", &["--noise", "sym:0.5"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let b = train(tmp.path(), "b", &["--noise", "sym:0.5"]);
    assert!(b.status.success(), "{}", stderr(&b));
    let run = tmp.path().join("runs/a");
    for f in ["config.toml", "metrics.jsonl", "report.json", "noise_ledger.csv", "ckpt/final.ckpt", "ckpt/teacher.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ma = fs::read(run.join("metrics.jsonl")).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, fs::read(tmp.path().join("runs/b/metrics.jsonl")).unwrap());
    let ra: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    let rb: serde_json::Value = serde_json::from_slice(&b.stdout).unwrap();
    assert_eq!(ra["accuracy"], rb["accuracy"]);

    // The snapshot alone reproduces the run.
    let c = tshn(&["train", "-c", "runs/a/config.toml", "--name", "c"], tmp.path());
    assert!(c.status.success(), "{}", stderr(&c));
    assert_eq!(ma, fs::read(tmp.path().join("runs/c/metrics.jsonl")).unwrap());

    let e = tshn(&["eval", "runs/a"], tmp.path());
    assert!(e.status.success(), "{}", stderr(&e));
    let ev: serde_json::Value = serde_json::from_slice(&e.stdout).unwrap();
    assert_eq!(ev["accuracy"], ra["accuracy"]);
}

#[test]
fn seed_falls_back_to_env() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--name", "env", "--method", "ce"];
    args.extend_from_slice(TINY);
    let o = Command::new(env!("CARGO_BIN_EXE_tshn"))
        .args(&args)
        .current_dir(tmp.path())
        .env("TSHN_SEED", "42")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = fs::read_to_string(tmp.path().join("runs/env/config.toml")).unwrap();
    assert!(cfg.contains("seed = 42"), "{cfg}");
}

#[test]
fn flags_override_config() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "seed = 3\nnoise = \"sym:0.2\"\n[train]\nepochs = 9\n").unwrap();
    let mut args = vec!["train", "-c", "c.toml", "--name", "o", "--method", "mae", "--noise", "sym:0.4"];
    args.extend_from_slice(TINY);
    let o = tshn(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = fs::read_to_string(tmp.path().join("runs/o/config.toml")).unwrap();
    assert!(snap.contains("seed = 3"));
    assert!(snap.contains("sym:0.4"));
    assert!(snap.contains("epochs = 1"));
}

#[test]
fn sweep_counts_resumes_and_emits_table() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args =
        vec!["sweep", "--name", "sw", "--methods", "tshn,ce", "--rates", "0,0.5", "--seeds", "1,2", "--emit-table1", "--jobs", "2"];
    args.extend_from_slice(TINY);
    let o = tshn(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("TSHN(↑)"), "{table}");
    let csv = tmp.path().join("runs/sw/report.csv");
    let rows = || fs::read_to_string(&csv).unwrap().lines().count() - 1;
    assert_eq!(rows(), 8);

    // Remove one record; a rerun recomputes only that cell.
    let runs = tmp.path().join("runs/sw/runs");
    let victim = fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    fs::remove_file(&victim).unwrap();
    let o = tshn(&args, tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(rows(), 8);
    assert!(victim.exists());
}
