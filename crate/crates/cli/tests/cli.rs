use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lstf_core::RunReport;

fn lstf(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lstf"))
        .args(args)
        .current_dir(cwd)
        .env("LSTF_RUN_ROOT", cwd.join("runs"))
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, t: usize, n: usize) -> PathBuf {
    let path = dir.join("s.csv");
    let o = lstf(
        dir,
        &["synth", "--kind", "sine_mix", "--T", &t.to_string(), "--n", &n.to_string(), "--seed", "7", "--out", "s.csv"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    path
}

const SMALL: &[&str] = &["--L", "16", "--S", "8", "--max_epochs", "2", "--lr0", "1e-3"];

fn train_into(dir: &Path, run: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "s.csv", "--run-dir", run];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    lstf(dir, &args)
}

#[test]
fn synth_writes_header_plus_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), 2000, 3);
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(text.lines().count(), 2001);
    assert_eq!(text.lines().next().unwrap(), "date,c0,c1,c2");
}

#[test]
fn train_eval_bench_report_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 400, 2);

    let o = train_into(d, "ml", &["--model", "mlinear"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["ckpt.json", "report.json", "summary.txt", "curves.csv"] {
        assert!(d.join("ml").join(f).is_file(), "missing {f}");
    }
    assert!(!d.join("ml/lock").exists());

    let report = RunReport::from_json(&fs::read_to_string(d.join("ml/report.json")).unwrap()).unwrap();
    assert!(report.test.normalized.mse.is_finite() && report.test.normalized.mae.is_finite());
    let curves = fs::read_to_string(d.join("ml/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), report.epochs.len() + 1);
    assert_eq!(curves.lines().next().unwrap(), "epoch,lr,train_loss,val_loss");

    let summary = fs::read_to_string(d.join("ml/summary.txt")).unwrap();
    assert!(summary.contains("best epoch"));
    assert!(summary.contains("  L = 16"));
    assert!(summary.contains("normalized mse"));

    let o = lstf(d, &["eval", "--checkpoint", "ml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval["normalized"]["mse"].as_f64().unwrap(), report.test.normalized.mse);

    let o = lstf(d, &["bench", "--checkpoint", "ml/ckpt.json"]);
    assert_eq!(code(&o), 2);

    let o = train_into(d, "inf", &["--model", "informer_lite", "--d_model", "8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = lstf(d, &["bench", "--checkpoint", "inf", "--max-windows", "10", "--out", "bench.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let bench: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(bench["reuse"]["measurement_dot_products"], 0);
    assert!(bench["recompute"]["measurement_dot_products"].as_u64().unwrap() > 0);
    assert_eq!(bench["windows"], 10);
    assert!(d.join("bench.json").is_file());

    let before: Vec<Vec<u8>> = ["summary.txt", "curves.csv"]
        .iter()
        .map(|f| fs::read(d.join("inf").join(f)).unwrap())
        .collect();
    for _ in 0..2 {
        let o = lstf(d, &["report", "inf"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(o.stdout, before[0]);
        let after: Vec<Vec<u8>> = ["summary.txt", "curves.csv"]
            .iter()
            .map(|f| fs::read(d.join("inf").join(f)).unwrap())
            .collect();
        assert_eq!(after, before);
    }
}

fn without_wall_clock(text: &str) -> String {
    text.split("\nwall clock").next().unwrap().to_owned()
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 300, 2);
    for run in ["a", "b"] {
        let o = train_into(d, run, &["--model", "informer_lite", "--d_model", "8", "--seed", "3"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |run: &str, f: &str| fs::read_to_string(d.join(run).join(f)).unwrap();
    assert_eq!(read("a", "ckpt.json"), read("b", "ckpt.json"));
    assert_eq!(read("a", "curves.csv"), read("b", "curves.csv"));
    assert_eq!(without_wall_clock(&read("a", "summary.txt")), without_wall_clock(&read("b", "summary.txt")));
    let strip = |run: &str| {
        let mut r = RunReport::from_json(&read(run, "report.json")).unwrap();
        r.wall_clock = Default::default();
        r
    };
    assert_eq!(strip("a"), strip("b"));
}

#[test]
fn default_run_directory_uses_env_root_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 300, 1);
    let mut args = vec!["train", "--data", "s.csv", "--seed", "5"];
    args.extend_from_slice(SMALL);
    for _ in 0..2 {
        let o = lstf(d, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<String> = fs::read_dir(d.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names.len(), 2);
    assert!(names.iter().all(|n| n.contains("-seed5")), "{names:?}");
}

#[test]
fn flags_override_config_file_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 300, 1);
    fs::write(d.join("c.cfg"), "# tuned\nlr0 = 0.002\nbatch_size=8 # small\npatience=1\n").unwrap();
    let o = train_into(d, "r", &["--config", "c.cfg", "--batch_size", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = RunReport::from_json(&fs::read_to_string(d.join("r/report.json")).unwrap()).unwrap();
    // SMALL passes --lr0 1e-3 as a flag, which beats the file's 0.002.
    assert_eq!(r.config.train.lr0, 1e-3);
    assert_eq!(r.config.train.batch_size, 4);
    assert_eq!(r.config.train.patience, 1);
    assert_eq!(r.config.train.max_epochs, 2);
    assert_eq!(r.config.train.adam.beta2, 0.999);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 300, 1);

    let o = lstf(d, &[]);
    assert_eq!(code(&o), 1);
    let o = lstf(d, &["train", "--data", "s.csv", "--learning_rate", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--learning_rate"));
    let o = lstf(d, &["train", "--data", "s.csv", "--lr0", "fast"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lr0"));

    fs::write(d.join("bad.cfg"), "max_epochs=2\nwarmup=3\n").unwrap();
    let o = lstf(d, &["train", "--data", "s.csv", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("\"warmup\""), "{}", stderr(&o));

    let o = lstf(d, &["synth", "--kind", "square", "--T", "5", "--out", "x.csv"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&lstf(d, &["--help"])), 0);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 300, 1);

    let o = lstf(d, &["train", "--data", "missing.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.csv"));

    fs::write(d.join("bad.csv"), "a\n1\nx\n").unwrap();
    let o = lstf(d, &["train", "--data", "bad.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("row 2"), "{}", stderr(&o));

    let o = lstf(d, &["eval", "--checkpoint", "nowhere"]);
    assert_eq!(code(&o), 2);
    let o = lstf(d, &["report", "nowhere"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, 300, 1);
    fs::create_dir(d.join("busy")).unwrap();
    fs::write(d.join("busy/lock"), "1\n").unwrap();
    let o = train_into(d, "busy", &[]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
    assert!(!d.join("busy/ckpt.json").exists());
}
