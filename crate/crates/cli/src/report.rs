use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use lstf_core::attention::OpCounters;
use lstf_core::config::Settings;
use lstf_core::RunReport;

use crate::{CURVES_FILE, REPORT_FILE, SUMMARY_FILE};

fn counters_line(name: &str, c: &OpCounters) -> String {
    format!(
        "  {name:<5} measurement {:>14}  attention {:>14}  multiplies {:>14}\n",
        c.measurement_dot_products, c.attention_dot_products, c.multiplies_total
    )
}

/// Human-readable run summary. Everything above the final "wall clock"
/// block is a pure function of config and seed.
pub fn summary(r: &RunReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "lstf {} run summary", r.version);
    let _ = writeln!(s, "model: {}", r.model);
    let _ = writeln!(
        s,
        "best epoch: {} of {} (stopped early: {})",
        r.best_epoch,
        r.epochs.len(),
        if r.stopped_early { "yes" } else { "no" }
    );

    s.push_str("\nconfig\n");
    let settings = Settings {
        model: r.config.model.clone(),
        train: r.config.train.clone(),
    };
    for (k, v) in settings.pairs() {
        let _ = writeln!(s, "  {k} = {v}");
    }

    let d = &r.data;
    s.push_str("\ndata\n");
    let _ = writeln!(s, "  rows {} x {} channels", d.rows, d.channels);
    let _ = writeln!(
        s,
        "  split rows {}/{}/{}{}",
        d.split_rows.0,
        d.split_rows.1,
        d.split_rows.2,
        if d.proportional_split { " (proportional)" } else { "" }
    );
    let _ = writeln!(
        s,
        "  windows train {} val {} test {}",
        d.train_windows, d.val_windows, d.test_windows
    );

    s.push_str("\nepochs\n  epoch  lr  train_loss  val_loss\n");
    for e in &r.epochs {
        let _ = writeln!(s, "  {}  {}  {}  {}", e.epoch, e.lr, e.train_loss, e.val_loss);
    }

    s.push_str("\ntest metrics\n");
    let t = &r.test;
    let _ = writeln!(s, "  windows {}", t.windows);
    let _ = writeln!(s, "  normalized mse {} mae {}", t.normalized.mse, t.normalized.mae);
    let _ = writeln!(s, "  raw        mse {} mae {}", t.raw.mse, t.raw.mae);

    s.push_str("\nattention counters\n");
    s.push_str(&counters_line("train", &r.counters.train));
    s.push_str(&counters_line("val", &r.counters.val));
    s.push_str(&counters_line("test", &r.counters.test));

    if !r.stability.is_empty() {
        s.push_str("\nindex stability (jaccard between consecutive epochs)\n");
        for row in &r.stability {
            let _ = writeln!(
                s,
                "  layer {} head {} epochs {}->{}: {:.4}",
                row.layer_id, row.head_id, row.epoch_a, row.epoch_b, row.jaccard
            );
        }
    }

    let w = &r.wall_clock;
    s.push_str("\nwall clock (seconds, not reproducible)\n");
    let _ = writeln!(
        s,
        "  train {:.3} val {:.3} test {:.3}",
        w.train_secs, w.val_secs, w.test_secs
    );
    s
}

/// One row per trained epoch.
pub fn curves_csv(r: &RunReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &r.epochs {
        w.serialize(e)?;
    }
    if r.epochs.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "val_loss"])?;
    }
    w.into_inner().context("flushing curves")
}

pub fn write_artifacts(dir: &Path, r: &RunReport) -> Result<()> {
    fs::write(dir.join(REPORT_FILE), r.to_json()?)?;
    emit(dir, r)
}

/// Writes summary.txt and curves.csv for `r` into `dir`.
pub fn emit(dir: &Path, r: &RunReport) -> Result<()> {
    fs::write(dir.join(SUMMARY_FILE), summary(r))?;
    fs::write(dir.join(CURVES_FILE), curves_csv(r)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<RunReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    RunReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}
