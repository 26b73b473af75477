use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use mim_core::repcenter::ParamClient;

const SMALL: &str = r#"{
    "world": {"n_items": 300, "n_users": 400, "n_ctr_samples": 4000, "n_purchases": 600},
    "encoder": {"dma": {"epochs": 1}},
    "csft": {"epochs": 1},
    "ciubm": {"epochs": 1},
    "eval": {"seeds": 1, "ablations": false}
}"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), config).unwrap();
        Self { dir }
    }

    fn cmd(&self, args: &[&str]) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mim"));
        c.arg("--config")
            .arg(self.dir.path().join("config.json"))
            .arg("--out")
            .arg(self.dir.path().join("runs"))
            .args(args)
            .env("RUST_LOG", "warn");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn run_dir(&self) -> PathBuf {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(self.dir.path().join("runs"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        dirs.pop().unwrap()
    }
}

fn report(run: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_config_key_exits_2() {
    let sb = Sandbox::new(r#"{"ciubm": {"learning_rate": 0.1}}"#);
    let out = sb.run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.lines().any(|l| l.starts_with("error class=invalid_config")),
        "{err}"
    );
}

#[test]
fn invalid_value_and_bad_flag_exit_2() {
    let sb = Sandbox::new(r#"{"csft": {"tau": 0.0}}"#);
    assert_eq!(sb.run(&["gen-data"]).status.code(), Some(2));
    let sb = Sandbox::new(SMALL);
    assert_eq!(sb.run(&["train-ctr", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(sb.run(&["train-ctr", "--variant", "deepfm"]).status.code(), Some(2));
}

#[test]
fn missing_upstream_artifact_exits_3() {
    let sb = Sandbox::new(SMALL);
    for stage in ["train-ctr", "build-repcenter", "train-csft"] {
        let out = sb.run(&[stage]);
        assert_eq!(out.status.code(), Some(3), "{stage}: {}", stderr(&out));
        assert!(stderr(&out).contains("error class=missing_artifact"));
    }
}

#[test]
fn staged_run_serves_and_accumulates_ctr_reports() {
    let sb = Sandbox::new(SMALL);
    let data = sb.ok(&["gen-data"]);
    assert!(data.starts_with("items=300 "), "{data}");
    sb.ok(&["pretrain-dma"]);
    let csft = sb.ok(&["train-csft"]);
    assert!(csft.contains("negatives="), "{csft}");
    let rc = sb.ok(&["build-repcenter"]);
    assert!(rc.starts_with("entries=300 "), "{rc}");

    let run = sb.run_dir();
    for f in [
        "config.json",
        "purchases.tsv",
        "triplets.tsv",
        "ctr_train.tsv",
        "ctr_test.tsv",
        "dma_head.bin",
        "csft_head.bin",
        "store.mimt",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let base = sb.ok(&["train-ctr", "--variant", "base"]);
    assert!(base.contains("auc="), "{base}");
    sb.ok(&["train-ctr", "--variant", "base+mim"]);
    assert_eq!(report(&run)["ctr"].as_array().unwrap().len(), 2);
    // Retraining a variant replaces its entry.
    sb.ok(&["train-ctr", "--variant", "base"]);
    assert_eq!(report(&run)["ctr"].as_array().unwrap().len(), 2);
    assert!(run.join("metrics-base.txt").is_file());

    let mut child = sb
        .cmd(&["serve-params", "--bind", "127.0.0.1:0", "--run-for-ms", "4000"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().strip_prefix("listening ").expect(&line).to_string();
    let client = ParamClient::connect(addr.as_str()).unwrap();
    let stats = client.stats().unwrap();
    assert_eq!(stats.entries, 300);
    let got = client.remote_lookup(&[u64::MAX]).unwrap();
    assert!(!got.entries[0].hit);
    drop(client);
    assert!(child.wait().unwrap().success());
}

#[test]
fn gen_data_is_idempotent() {
    let sb = Sandbox::new(SMALL);
    sb.ok(&["gen-data"]);
    let run = sb.run_dir();
    let read = |f: &str| std::fs::read(run.join(f)).unwrap();
    let first: Vec<Vec<u8>> = ["triplets.tsv", "ctr_train.tsv", "ctr_test.tsv"]
        .iter()
        .map(|f| read(f))
        .collect();
    sb.ok(&["gen-data"]);
    let second: Vec<Vec<u8>> = ["triplets.tsv", "ctr_train.tsv", "ctr_test.tsv"]
        .iter()
        .map(|f| read(f))
        .collect();
    assert_eq!(first, second);
}

#[test]
fn flops_json_lists_every_variant() {
    let sb = Sandbox::new(SMALL);
    let text = sb.ok(&["flops", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let rows = v.as_array().expect("row list");
    assert_eq!(rows.len(), 4);
    let table = sb.ok(&["flops"]);
    assert!(table.starts_with("variant"));
    assert_eq!(table.lines().count(), 9);
}

#[test]
fn grad_check_passes() {
    let sb = Sandbox::new(SMALL);
    let out = sb.ok(&["grad-check", "--cases", "3"]);
    assert_eq!(out.lines().filter(|l| l.ends_with(" pass")).count(), 9, "{out}");
}
