use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn xder(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xder")).env("XDER_OUT", out).args(args).output().unwrap()
}

fn stdout_path(o: &Output) -> PathBuf {
    PathBuf::from(String::from_utf8_lossy(&o.stdout).lines().last().unwrap())
}

const SMALL: &[&str] = &["--per-class", "20", "--epochs", "1", "--hidden", "8"];

fn run(out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["run"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    let o = xder(out, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    stdout_path(&o)
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(tmp.path(), &["--method", "xder", "--tasks", "5", "--seed", "1"]);
    assert!(dir.starts_with(tmp.path()));
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("xder-s1-"));
    let matrix = std::fs::read_to_string(dir.join("matrix.csv")).unwrap();
    assert_eq!(matrix.lines().next().unwrap().split(',').count(), 6);
    assert_eq!(matrix.lines().count(), 6);
    for f in ["manifest.json", "config.txt", "losses.jsonl", "metrics.jsonl", "buffer.bin"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    for t in 0..5 {
        assert!(dir.join(format!("checkpoints/task_{t}.ckpt")).is_file());
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "complete");
    assert_eq!(manifest["seed"], 1);
    let line = std::fs::read_to_string(dir.join("losses.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for k in ["step", "task", "term", "value"] {
        assert!(rec.get(k).is_some(), "{k}");
    }
}

#[test]
fn rerun_needs_force_and_reproduces_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["--method", "der", "--tasks", "3"];
    let dir = run(tmp.path(), &args);
    let before: Vec<Vec<u8>> = ["matrix.csv", "losses.jsonl", "buffer.bin", "metrics.jsonl", "checkpoints/task_2.ckpt"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect();

    let mut again = vec!["run"];
    again.extend_from_slice(SMALL);
    again.extend_from_slice(&args);
    let o = xder(tmp.path(), &again);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));

    again.push("--force");
    let o = xder(tmp.path(), &again);
    assert!(o.status.success());
    let after: Vec<Vec<u8>> = ["matrix.csv", "losses.jsonl", "buffer.bin", "metrics.jsonl", "checkpoints/task_2.ckpt"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).unwrap())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let o = xder(tmp.path(), &["run", "--gamm", "0.8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`gamm`"));

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "# comment\nmethod = er\nlearning_rate = 0.1\n").unwrap();
    let o = xder(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("`learning_rate`"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "method = er  # replay\nseed = 3\ntasks = 2\n").unwrap();
    let mut args = vec!["run", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--seed", "7"]);
    let o = xder(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = stdout_path(&o);
    assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("er-s7-"));
    let echo = std::fs::read_to_string(dir.join("config.txt")).unwrap();
    assert!(echo.contains("seed = 7\n") && echo.contains("tasks = 2\n"));
}

#[test]
fn compare_groups_methods_and_rejects_incomplete_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let ft = run(tmp.path(), &["--method", "ft", "--tasks", "3", "--epochs", "4", "--lr", "0.1"]);
    let jt = run(tmp.path(), &["--method", "jt", "--tasks", "3", "--epochs", "4", "--lr", "0.1"]);
    let jt2 = run(tmp.path(), &["--method", "jt", "--tasks", "3", "--epochs", "4", "--lr", "0.1", "--seed", "1"]);
    let o = xder(tmp.path(), &["compare", ft.to_str().unwrap(), jt.to_str().unwrap(), jt2.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,seed_count,faa_mean,faa_std,ff_mean,ff_std,ece_mean,ece_std");
    assert_eq!(lines.len(), 3);
    let faa = |l: &str| l.split(',').nth(2).unwrap().parse::<f64>().unwrap();
    assert!(lines[1].starts_with("ft,1,"));
    assert!(lines[2].starts_with("jt,2,"));
    assert!(faa(lines[2]) > faa(lines[1]), "{table}");

    let m = jt.join("manifest.json");
    let text = std::fs::read_to_string(&m).unwrap().replace("\"complete\"", "\"running\"");
    std::fs::write(&m, text).unwrap();
    let o = xder(tmp.path(), &["compare", jt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let o = xder(tmp.path(), &["compare", tmp.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn analyze_probes_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run(tmp.path(), &["--method", "xder", "--tasks", "3"]);
    let d = dir.to_str().unwrap();

    let o = xder(tmp.path(), &["analyze", "flatness", d, "--alphas", "0,0.1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.join("analysis/flatness.csv")).unwrap();
    let first: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1], first[2]);

    let o = xder(tmp.path(), &["analyze", "bias", d]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.join("analysis/bias_histogram.csv").is_file());
    assert!(dir.join("analysis/logit_profile.csv").is_file());

    for probe in [&["fisher"][..], &["offline", "--mode", "both", "--retrain-epochs", "2"], &["transfer", "--shots", "1,5"]] {
        let mut args = vec!["analyze", probe[0], d];
        args.extend_from_slice(&probe[1..]);
        let o = xder(tmp.path(), &args);
        assert!(o.status.success(), "{probe:?}: {}", String::from_utf8_lossy(&o.stderr));
    }

    std::fs::remove_file(dir.join("buffer.bin")).unwrap();
    let o = xder(tmp.path(), &["analyze", "offline", d, "--mode", "both"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("buffer.bin"));
}

#[test]
fn generated_stream_feeds_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("blobs.txt");
    let o = xder(tmp.path(), &["generate-stream", "--output", file.to_str().unwrap(), "--tasks", "2", "--per-class", "15"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&file).unwrap().starts_with("d=8 "));

    let dir = run(tmp.path(), &["--method", "er", "--dataset", file.to_str().unwrap(), "--tasks", "2"]);
    assert!(dir.join("matrix.csv").is_file());

    let o = xder(tmp.path(), &["run", "--method", "er", "--dataset", tmp.path().join("missing.txt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn divergence_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    // logit matching this strong oscillates out of range during the second task
    let args = ["run", "--method", "xder", "--tasks", "2", "--eta", "1", "--alpha", "3", "--lr", "0.05", "--epochs", "10"];
    let o = xder(tmp.path(), &args);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = std::fs::read_dir(tmp.path()).unwrap().next().unwrap().unwrap().path();
    let manifest = std::fs::read_to_string(dir.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"failed\""));
    assert!(manifest.contains("diverged"));
}
