//! The `lstf` command: synth, train, eval, bench and report.
//!
//! Exit codes: 0 on success, 1 on usage errors (bad flags, unknown or
//! malformed settings), 2 when the run itself fails.

pub mod args;
pub mod report;
pub mod rundir;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::ArgMatches;
use lstf_core::config::{load_config_file, Settings};
use lstf_core::data::{load_csv_with, split_ett, synth_generate_with, write_csv, CsvOptions, SynthParams};
use lstf_core::train::{bench_reuse, evaluate, train};
use lstf_core::{Checkpoint, SeriesFrame, SynthKind};

use rundir::{checkpoint_path, fresh_run_dir, RunLock};

pub const CHECKPOINT_FILE: &str = "ckpt.json";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CURVES_FILE: &str = "curves.csv";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<lstf_core::Error> for CliError {
    fn from(e: lstf_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match args::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut out = std::io::stdout().lock();
    match dispatch(&matches, &mut out) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn dispatch(m: &ArgMatches, out: &mut impl Write) -> CliResult<()> {
    match m.subcommand() {
        Some(("synth", sub)) => synth(sub, out),
        Some(("train", sub)) => train_cmd(sub, out),
        Some(("eval", sub)) => eval_cmd(sub, out),
        Some(("bench", sub)) => bench_cmd(sub, out),
        Some(("report", sub)) => report_cmd(sub, out),
        _ => Err(CliError::Usage("missing subcommand".into())),
    }
}

fn synth(m: &ArgMatches, out: &mut impl Write) -> CliResult<()> {
    let kind: SynthKind = m
        .get_one::<String>("kind")
        .expect("defaulted")
        .parse()
        .map_err(CliError::Usage)?;
    let t = *m.get_one::<usize>("T").expect("required");
    let n = *m.get_one::<usize>("n").expect("defaulted");
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let mut p = SynthParams::default();
    if let Some(v) = m.get_many::<f64>("periods") {
        p.periods = v.copied().collect();
    }
    if let Some(v) = m.get_many::<f64>("amplitudes") {
        p.amplitudes = v.copied().collect();
    }
    if let Some(&v) = m.get_one::<f64>("noise") {
        p.noise = v;
    }
    if let Some(&v) = m.get_one::<f64>("step") {
        p.step = v;
    }
    let path = m.get_one::<PathBuf>("out").expect("required");
    let frame = synth_generate_with(kind, t, n, seed, &p)?;
    write_csv(&frame, path)?;
    writeln!(out, "wrote {} rows x {} channels to {}", t, n, path.display())?;
    Ok(())
}

/// Defaults, then the config file, then flags. Returns whether `n` was set
/// explicitly.
fn settings(m: &ArgMatches) -> CliResult<(Settings, bool)> {
    let mut s = Settings::default();
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(path) = m.get_one::<PathBuf>("config") {
        pairs = load_config_file(path).map_err(|e| match e {
            lstf_core::Error::Io(_) => CliError::Runtime(anyhow!("{}: {e}", path.display())),
            other => CliError::Usage(format!("{}: {other}", path.display())),
        })?;
    }
    pairs.extend(args::settings_flags(m).into_iter().map(|(k, v)| (k.to_owned(), v)));
    let explicit_n = pairs.iter().any(|(k, _)| k == "n");
    s.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((s, explicit_n))
}

fn load_data(path: &Path, m: &ArgMatches) -> CliResult<SeriesFrame> {
    let opts = CsvOptions {
        has_timestamp_col: None,
        forward_fill: m.get_flag("forward_fill"),
    };
    Ok(load_csv_with(path, &opts).with_context(|| format!("loading {}", path.display()))?)
}

fn train_cmd(m: &ArgMatches, out: &mut impl Write) -> CliResult<()> {
    let (mut s, explicit_n) = settings(m)?;
    let data = m.get_one::<PathBuf>("data").expect("required");
    let frame = load_data(data, m)?;
    if !explicit_n {
        s.model.channels = frame.channels();
    }
    s.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    s.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let dir = match m.get_one::<PathBuf>("run_dir") {
        Some(d) => d.clone(),
        None => {
            let root = std::env::var_os(args::RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            fresh_run_dir(&root, s.train.seed)
        }
    };
    let _lock = RunLock::acquire(&dir)?;
    let outcome = train(&s.model, &frame, &s.train)?;
    let mut ckpt = outcome.checkpoint;
    ckpt.data_path = Some(data.display().to_string());
    ckpt.save(dir.join(CHECKPOINT_FILE))?;
    report::write_artifacts(&dir, &outcome.report)?;
    let t = &outcome.report.test;
    writeln!(out, "run directory: {}", dir.display())?;
    writeln!(
        out,
        "best epoch {} of {}; test mse {} mae {} (normalized)",
        outcome.report.best_epoch,
        outcome.report.epochs.len(),
        t.normalized.mse,
        t.normalized.mae
    )?;
    Ok(())
}

fn checkpoint_and_split(m: &ArgMatches) -> CliResult<(Checkpoint, SeriesFrame)> {
    let path = checkpoint_path(m.get_one::<PathBuf>("checkpoint").expect("required"));
    let ckpt = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let data = match m.get_one::<PathBuf>("data") {
        Some(p) => p.clone(),
        None => PathBuf::from(ckpt.data_path.clone().ok_or_else(|| {
            CliError::Usage("checkpoint records no data file; pass --data".into())
        })?),
    };
    let frame = load_data(&data, m)?;
    let splits = split_ett(&frame)?;
    let split = match m.get_one::<String>("split").map(String::as_str) {
        Some("train") => splits.train,
        Some("val") => splits.val,
        _ => splits.test,
    };
    Ok((ckpt, split))
}

fn emit_json(m: &ArgMatches, json: String, out: &mut impl Write) -> CliResult<()> {
    if let Some(path) = m.get_one::<PathBuf>("out") {
        fs::write(path, &json)?;
    }
    out.write_all(json.as_bytes())?;
    Ok(())
}

fn eval_cmd(m: &ArgMatches, out: &mut impl Write) -> CliResult<()> {
    let (ckpt, split) = checkpoint_and_split(m)?;
    let report = evaluate(&ckpt, &split)?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n";
    emit_json(m, json, out)
}

fn bench_cmd(m: &ArgMatches, out: &mut impl Write) -> CliResult<()> {
    let (ckpt, split) = checkpoint_and_split(m)?;
    let max = m.get_one::<usize>("max_windows").copied();
    let report = bench_reuse(&ckpt, &split, max)?;
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)? + "\n";
    emit_json(m, json, out)
}

fn report_cmd(m: &ArgMatches, out: &mut impl Write) -> CliResult<()> {
    let dir = m.get_one::<PathBuf>("run_dir").expect("required");
    if !dir.join(REPORT_FILE).is_file() {
        return Err(CliError::Runtime(anyhow!("{} has no {REPORT_FILE}", dir.display())));
    }
    let _lock = RunLock::acquire(dir)?;
    let r = report::load(dir)?;
    report::emit(dir, &r)?;
    out.write_all(report::summary(&r).as_bytes())?;
    Ok(())
}
