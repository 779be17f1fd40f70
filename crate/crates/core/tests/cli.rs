use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn icm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icm"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> (PathBuf, PathBuf) {
    let mut args = vec!["synth", "--out", name, "--size", "40", "--seed", "7"];
    args.extend_from_slice(extra);
    let out = icm(dir, &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir.join(name), dir.join(format!("{name}.toml")))
}

fn label(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "label", "--dataset", "task.jsonl", "--config", "task.jsonl.toml", "--out", out,
        "--iterations", "120",
    ];
    args.extend_from_slice(extra);
    icm(dir, &args)
}

#[test]
fn synth_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, ca) = synth(dir.path(), "a.jsonl", &[]);
    let (b, cb) = synth(dir.path(), "b.jsonl", &[]);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    assert_eq!(fs::read(ca).unwrap(), fs::read(cb).unwrap());
}

#[test]
fn label_runs_are_byte_identical_and_complete() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "task.jsonl", &[]);
    let first = label(dir.path(), "one.jsonl", &[]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = label(dir.path(), "two.jsonl", &[]);
    assert!(second.status.success());
    let one = fs::read_to_string(dir.path().join("one.jsonl")).unwrap();
    assert_eq!(one, fs::read_to_string(dir.path().join("two.jsonl")).unwrap());
    assert_eq!(one.lines().count(), 40);
    assert!(one.lines().all(|l| l.contains("\"label\":")));
    let manifest = fs::read_to_string(dir.path().join("one.jsonl.manifest.jsonl")).unwrap();
    assert!(manifest.contains("\"outcome\":\"completed\""));
    assert!(manifest.contains("\"dataset_digest\":"));
}

#[test]
fn interrupted_run_resumes_to_the_same_result() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "task.jsonl", &[]);
    assert!(label(dir.path(), "full.jsonl", &[]).status.success());
    let halted = label(dir.path(), "part.jsonl", &["--halt-after", "50"]);
    assert!(halted.status.success());
    assert!(!dir.path().join("part.jsonl").exists());
    let resumed = icm(dir.path(), &["resume", "--checkpoint", "part.jsonl.checkpoint.json"]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    let full = fs::read(dir.path().join("full.jsonl")).unwrap();
    assert_eq!(fs::read(dir.path().join("part.jsonl")).unwrap(), full);

    // a finished run resumes as a no-op
    let again = icm(dir.path(), &["resume", "--checkpoint", "part.jsonl.checkpoint.json"]);
    assert!(again.status.success());
    assert_eq!(fs::read(dir.path().join("part.jsonl")).unwrap(), full);
}

#[test]
fn resume_refuses_a_modified_dataset() {
    let dir = TempDir::new().unwrap();
    let (data, _) = synth(dir.path(), "task.jsonl", &[]);
    assert!(label(dir.path(), "out.jsonl", &["--halt-after", "10"]).status.success());
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("{\"id\":\"extra\",\"claim\":\"new\"}\n");
    fs::write(&data, text).unwrap();
    let out = icm(dir.path(), &["resume", "--checkpoint", "out.jsonl.checkpoint.json"]);
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

#[test]
fn unreachable_backend_leaves_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "task.jsonl", &[]);
    fs::write(
        dir.path().join("remote.toml"),
        "predictor = \"remote\"\n[backend]\nbase_url = \"http://127.0.0.1:9\"\nmax_retries = 1\nretry_base_delay = 0.01\nauth_token_env = \"ICM_CLI_TEST_TOKEN\"\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_icm"))
        .current_dir(dir.path())
        .env("ICM_CLI_TEST_TOKEN", "very-secret-token")
        .args(["label", "--dataset", "task.jsonl", "--config", "remote.toml", "--out", "r.jsonl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("http://127.0.0.1:9/v1/label-logprobs"), "{stderr}");
    assert!(!stderr.contains("very-secret-token"));
    assert!(dir.path().join("r.jsonl.checkpoint.json").exists());
    assert!(!dir.path().join("r.jsonl").exists());
    for entry in fs::read_dir(dir.path()).unwrap() {
        let text = fs::read_to_string(entry.unwrap().path()).unwrap_or_default();
        assert!(!text.contains("very-secret-token"));
    }
    let manifest = fs::read_to_string(dir.path().join("r.jsonl.manifest.jsonl")).unwrap();
    assert!(manifest.contains("aborted_resumable"));
}

#[test]
fn bruteforce_and_eval_report() {
    let dir = TempDir::new().unwrap();
    let out = icm(
        dir.path(),
        &["synth", "--out", "small.jsonl", "--size", "8", "--link-fraction", "1", "--seed", "2"],
    );
    assert!(out.status.success());
    let bf = icm(
        dir.path(),
        &["bruteforce", "--dataset", "small.jsonl", "--config", "small.jsonl.toml"],
    );
    assert!(bf.status.success(), "{}", String::from_utf8_lossy(&bf.stderr));
    let stdout = String::from_utf8_lossy(&bf.stdout);
    let u: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("utility="))
        .unwrap()
        .parse()
        .unwrap();
    // planted optimum: eight terms of (1 + 7) / (2 + 7) at alpha 50
    assert!((u - 400.0 * (8.0f64 / 9.0).ln()).abs() < 1e-9);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("ex-")).count(), 8);

    // labels equal to golden score 1.0
    let text = fs::read_to_string(dir.path().join("small.jsonl")).unwrap();
    let labeled: String = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["label"] = v["golden_label"].clone();
            format!("{v}\n")
        })
        .collect();
    fs::write(dir.path().join("golden.jsonl"), labeled).unwrap();
    let ev = icm(dir.path(), &["eval", "--labels", "golden.jsonl", "--dataset", "small.jsonl"]);
    assert!(ev.status.success());
    assert!(String::from_utf8_lossy(&ev.stdout).contains("accuracy=1.000000"));
}

#[test]
fn error_exit_codes() {
    let dir = TempDir::new().unwrap();
    synth(dir.path(), "task.jsonl", &[]);
    fs::write(dir.path().join("bad.toml"), "alpha = \"lots\"\n").unwrap();
    let out = icm(
        dir.path(),
        &["label", "--dataset", "task.jsonl", "--config", "bad.toml", "--out", "x.jsonl"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = label(dir.path(), "x.jsonl", &["--t-min", "50"]);
    assert_eq!(out.status.code(), Some(2));

    fs::write(dir.path().join("broken.jsonl"), "{\"id\":\"a\",\"claim\":\"x\"}\nnot json\n").unwrap();
    let out = icm(
        dir.path(),
        &["label", "--dataset", "broken.jsonl", "--config", "task.jsonl.toml", "--out", "y.jsonl"],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = icm(dir.path(), &["resume", "--checkpoint", "missing.json"]);
    assert_eq!(out.status.code(), Some(5));
}
