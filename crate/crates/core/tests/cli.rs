use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attractor_mem::bench::Checkpoint;
use serde_json::json;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attractor-mem"))
}

fn run(args: &[&str], out: &Path, threads: Option<&str>) -> Output {
    let mut c = bin();
    c.args(args).arg("--out").arg(out);
    if let Some(t) = threads {
        c.env("ATTRACTOR_MEM_THREADS", t);
    }
    let o = c.output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn write_config(dir: &Path, name: &str, v: serde_json::Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    p
}

fn train_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "train.json",
        json!({
            "mode": "train",
            "seed": 4,
            "train": {
                "arch": { "kind": "gated-rnn", "dim": 8, "hidden": 8, "hops": 2, "dynamic": 4 },
                "batch": 2, "write_steps": 2, "read_steps": 2,
                "distortion": { "mask": { "kind": "bit-flip-count", "count": 2 }, "fill": "flip" },
                "max_steps": 6, "window": 3, "init_write_rate": 0.01, "init_read_step": 0.5
            }
        }),
    )
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        let x = fs::read(a.join(n)).unwrap();
        assert!(!x.is_empty(), "{n} is empty");
        assert_eq!(x, fs::read(b.join(n)).unwrap(), "{n} differs");
    }
}

#[test]
fn table1_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "t1.json",
        json!({ "mode": "table1", "seed": 3, "trials": 4, "dim": 32, "sizes": [4, 8] }),
    );
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["table1", "--config", cfg, "--deterministic", "--precision", "64"];
    run(&args, &a, Some("1"));
    run(&args, &b, None);
    same_files(&a, &b, &["metrics.jsonl", "table1.csv"]);
    let csv = fs::read_to_string(a.join("table1.csv")).unwrap();
    assert!(csv.starts_with("method,"), "{csv}");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn training_and_evaluation_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = ["train", "--config", cfg, "--deterministic", "--precision", "64"];
    run(&args, &a, None);
    run(&args, &b, None);
    same_files(&a, &b, &["metrics.jsonl", "checkpoint.ckpt"]);
    assert_eq!(fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().count(), 2);

    let ck_path = a.join("checkpoint.ckpt");
    let bytes = fs::read(&ck_path).unwrap();
    let ck = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(ck.state.step, 6);
    assert_eq!(ck.to_bytes().unwrap(), bytes);

    let ev = write_config(
        dir.path(),
        "eval.json",
        json!({
            "mode": "eval", "seed": 1, "trials": 5, "dim": 8, "sizes": [2],
            "methods": ["hebb", "ebmm"], "checkpoints": [ck_path]
        }),
    );
    let ev = ev.to_str().unwrap();
    let (c, d) = (dir.path().join("c"), dir.path().join("d"));
    run(&["eval", "--config", ev, "--deterministic"], &c, None);
    run(&["eval", "--config", ev, "--deterministic"], &d, Some("1"));
    same_files(&c, &d, &["metrics.jsonl", "distortion_rate.csv"]);

    let hist = write_config(
        dir.path(),
        "hist.json",
        json!({ "mode": "energy-hist", "seed": 2, "trials": 3, "checkpoints": [ck_path] }),
    );
    let hist = hist.to_str().unwrap();
    let (e, f) = (dir.path().join("e"), dir.path().join("f"));
    run(&["energy-hist", "--config", hist, "--deterministic"], &e, None);
    run(&["energy-hist", "--config", hist, "--deterministic"], &f, None);
    same_files(&e, &f, &["metrics.jsonl", "energy_hist.csv"]);
    // 2 patterns written, 2 distorted, 2 unseen per batch.
    assert_eq!(fs::read_to_string(e.join("energy_hist.csv")).unwrap().lines().count(), 1 + 3 * 6);
}

#[test]
fn resuming_from_a_checkpoint_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_config(dir.path());
    let whole = dir.path().join("whole");
    run(&["train", "--config", cfg.to_str().unwrap(), "--deterministic", "--precision", "64"], &whole, None);

    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    v["train"]["max_steps"] = json!(3);
    let half_cfg = write_config(dir.path(), "half.json", v.clone());
    let half = dir.path().join("half");
    run(&["train", "--config", half_cfg.to_str().unwrap(), "--deterministic", "--precision", "64"], &half, None);
    v["train"]["max_steps"] = json!(6);
    v["checkpoints"] = json!([half.join("checkpoint.ckpt")]);
    let rest_cfg = write_config(dir.path(), "rest.json", v);
    let rest = dir.path().join("rest");
    run(&["train", "--config", rest_cfg.to_str().unwrap(), "--deterministic", "--precision", "64"], &rest, None);
    same_files(&whole, &rest, &["checkpoint.ckpt"]);
}

#[test]
fn gradcheck_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--seed", "5"], dir.path(), None);
    let csv = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
    assert_eq!(csv, String::from_utf8(o.stdout).unwrap());
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")), "{csv}");
}

#[test]
fn bad_configs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = train_config(dir.path());
    let o = bin().args(["table1", "--config", cfg.to_str().unwrap()]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));

    let bad = write_config(dir.path(), "bad.json", json!({ "mode": "table1", "bogus": 1 }));
    let o = bin().args(["table1", "--config", bad.to_str().unwrap()]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!o.status.success());

    let o = bin().args(["energy-hist"]).arg("--out").arg(dir.path()).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}
