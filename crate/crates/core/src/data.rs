//! CSV ingestion, ETT-style splits, z-score normalization, sliding windows
//! and seeded synthetic series.

use std::path::Path;

use chrono::NaiveDateTime;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, streams};
use crate::tensor::Tensor;

/// A `T×n` table of observations with optional timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFrame {
    timestamps: Option<Vec<String>>,
    values: Tensor,
    channel_names: Vec<String>,
}

impl SeriesFrame {
    pub fn new(
        timestamps: Option<Vec<String>>,
        values: Tensor,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let (t, n) = values.dims2("series frame")?;
        if channel_names.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} channel names for {n} columns",
                channel_names.len()
            )));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != t {
                return Err(Error::InvalidArgument(format!(
                    "{} timestamps for {t} rows",
                    ts.len()
                )));
            }
        }
        if !values.all_finite() {
            return Err(Error::InvalidArgument("series frame has non-finite values".into()));
        }
        Ok(Self {
            timestamps,
            values,
            channel_names,
        })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    /// Rows `start..end` as a new frame.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::InvalidArgument(format!(
                "row range {start}..{end} invalid for {} rows",
                self.len()
            )));
        }
        let n = self.channels();
        let data = self.values.data()[start * n..end * n].to_vec();
        Self::new(
            self.timestamps.as_ref().map(|t| t[start..end].to_vec()),
            Tensor::new(vec![end - start, n], data)?,
            self.channel_names.clone(),
        )
    }

    fn with_values(&self, values: Tensor) -> Result<Self> {
        Self::new(self.timestamps.clone(), values, self.channel_names.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CsvOptions {
    /// `None` treats the first column as timestamps when its header is
    /// `date`.
    pub has_timestamp_col: Option<bool>,
    /// Fill empty cells with the previous row's value instead of failing.
    pub forward_fill: bool,
}

/// Reads a header-first, comma-separated file. Errors name 1-based data
/// rows (the header is not counted) and 1-based file columns.
pub fn load_csv(path: impl AsRef<Path>, has_timestamp_col: bool) -> Result<SeriesFrame> {
    load_csv_with(
        path,
        &CsvOptions {
            has_timestamp_col: Some(has_timestamp_col),
            forward_fill: false,
        },
    )
}

pub fn load_csv_with(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<SeriesFrame> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let has_ts = opts
        .has_timestamp_col
        .unwrap_or_else(|| header[0].eq_ignore_ascii_case("date"));
    let first = usize::from(has_ts);
    let names = header[first..].to_vec();
    if names.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: no value columns",
            path.display()
        )));
    }
    let n = names.len();
    let mut stamps = Vec::new();
    let mut data = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        if record.len() != header.len() {
            return Err(Error::CsvRagged {
                path: path.to_path_buf(),
                row,
                found: record.len(),
                expected: header.len(),
            });
        }
        if has_ts {
            stamps.push(record[0].to_owned());
        }
        for (j, cell) in record.iter().enumerate().skip(first) {
            let value = if cell.is_empty() && opts.forward_fill && i > 0 {
                data[data.len() - n]
            } else {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::CsvCell {
                        path: path.to_path_buf(),
                        row,
                        column: j + 1,
                        cell: cell.to_owned(),
                    })?
            };
            data.push(value);
        }
    }
    if data.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let t = data.len() / n;
    SeriesFrame::new(
        has_ts.then_some(stamps),
        Tensor::new(vec![t, n], data)?,
        names,
    )
}

/// Writes `frame` in the format [`load_csv`] reads. Values use the
/// shortest round-trip representation.
pub fn write_csv(frame: &SeriesFrame, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::with_capacity(frame.channels() + 1);
    if frame.timestamps.is_some() {
        header.push("date".to_owned());
    }
    header.extend(frame.channel_names.iter().cloned());
    w.write_record(&header)?;
    for t in 0..frame.len() {
        let mut rec = Vec::with_capacity(header.len());
        if let Some(ts) = &frame.timestamps {
            rec.push(ts[t].clone());
        }
        rec.extend(frame.values.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Hourly,
    FifteenMinute,
}

impl Sampling {
    /// Rows per 30-day month.
    pub fn rows_per_month(self) -> usize {
        match self {
            Self::Hourly => 30 * 24,
            Self::FifteenMinute => 30 * 24 * 4,
        }
    }
}

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%Y-%m-%dT%H:%M",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// 15-minute when the first two timestamps are 15 minutes apart, hourly
/// otherwise (including frames without timestamps).
pub fn detect_sampling(frame: &SeriesFrame) -> Sampling {
    let step = frame.timestamps().and_then(|ts| {
        let a = parse_timestamp(ts.first()?)?;
        let b = parse_timestamp(ts.get(1)?)?;
        Some((b - a).num_minutes())
    });
    if step == Some(15) {
        Sampling::FifteenMinute
    } else {
        Sampling::Hourly
    }
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: SeriesFrame,
    pub val: SeriesFrame,
    pub test: SeriesFrame,
    /// Set when the frame was shorter than 20 months and was split 12:4:4
    /// proportionally.
    pub proportional: bool,
}

impl Splits {
    pub fn lens(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

/// Row counts of a 12/4/4-month split for `t` rows.
pub fn split_lengths(t: usize, sampling: Sampling) -> Result<(usize, usize, usize, bool)> {
    if t < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 rows to split, got {t}"
        )));
    }
    let month = sampling.rows_per_month();
    if t >= 20 * month {
        return Ok((12 * month, 4 * month, 4 * month, false));
    }
    let train = (t * 12 / 20).max(1);
    let val = (t * 4 / 20).max(1);
    Ok((train, val, t - train - val, true))
}

/// Chronological train/val/test split covering 12/4/4 months (30-day
/// months). Rows past 20 months are dropped.
pub fn split_ett(frame: &SeriesFrame) -> Result<Splits> {
    split_ett_with(frame, detect_sampling(frame))
}

pub fn split_ett_with(frame: &SeriesFrame, sampling: Sampling) -> Result<Splits> {
    let (a, b, c, proportional) = split_lengths(frame.len(), sampling)?;
    Ok(Splits {
        train: frame.slice(0, a)?,
        val: frame.slice(a, a + b)?,
        test: frame.slice(a + b, a + b + c)?,
        proportional,
    })
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(train: &SeriesFrame) -> Result<Self> {
        let (t, n) = (train.len(), train.channels());
        let mut mean = vec![0.0; n];
        for row in train.values.data().chunks(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; n];
        for row in train.values.data().chunks(n) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / t as f64).sqrt()).collect();
        for (j, &s) in std.iter().enumerate() {
            let scale = mean[j].abs().max(1.0);
            if !(s > 1e-12 * scale) {
                return Err(Error::DegenerateChannel {
                    name: train.channel_names[j].clone(),
                });
            }
        }
        Ok(Self { mean, std })
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let (_, n) = x.dims2("normalizer")?;
        if n != self.mean.len() {
            return Err(Error::Shape {
                op: "normalizer channels",
                left: vec![self.mean.len()],
                right: x.shape().to_vec(),
            });
        }
        Ok(n)
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % n]) / self.std[i % n];
        }
        Ok(out)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.check(x)?;
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % n] + self.mean[i % n];
        }
        Ok(out)
    }

    pub fn normalize_frame(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        frame.with_values(self.normalize(&frame.values)?)
    }
}

/// One training example: `lookback` rows `start..start+L` and the `S`
/// rows that follow.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastWindow {
    pub start: usize,
    pub lookback: Tensor,
    pub target: Tensor,
}

/// Number of windows `make_windows` yields.
pub fn window_count(t: usize, l: usize, s: usize, stride: usize) -> usize {
    if t < l + s || stride == 0 {
        0
    } else {
        (t - l - s) / stride + 1
    }
}

pub fn make_windows(
    frame: &SeriesFrame,
    l: usize,
    s: usize,
    stride: usize,
) -> Result<Vec<ForecastWindow>> {
    if l == 0 || s == 0 || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "L, S and stride must be at least 1, got {l}, {s}, {stride}"
        )));
    }
    let n = frame.channels();
    let data = frame.values.data();
    (0..window_count(frame.len(), l, s, stride))
        .map(|w| {
            let start = w * stride;
            let mid = start + l;
            Ok(ForecastWindow {
                start,
                lookback: Tensor::new(vec![l, n], data[start * n..mid * n].to_vec())?,
                target: Tensor::new(vec![s, n], data[mid * n..(mid + s) * n].to_vec())?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    #[default]
    SineMix,
    TrendSeason,
    RandomWalk,
}

impl std::str::FromStr for SynthKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sine_mix" => Ok(Self::SineMix),
            "trend_season" => Ok(Self::TrendSeason),
            "random_walk" => Ok(Self::RandomWalk),
            other => Err(format!(
                "expected sine_mix|trend_season|random_walk, got {other:?}"
            )),
        }
    }
}

impl std::fmt::Display for SynthKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SineMix => "sine_mix",
            Self::TrendSeason => "trend_season",
            Self::RandomWalk => "random_walk",
        })
    }
}

/// Generator parameters.
///
/// * `sine_mix`: channel `c` is `Σ_k amplitudes[k]·sin(2πt/periods[(c+k) mod
///   K] + φ_ck)` plus Gaussian noise, with phases `φ_ck` uniform in
///   `[0, 2π)`. Defaults: periods 24, 12, 48; amplitudes 1, 0.5, 0.25.
/// * `trend_season`: `trend·t/T + sin(2πt/periods[c mod K] + φ_c)` plus
///   noise, with `trend` drawn uniformly from `[-2, 2]` per channel.
/// * `random_walk`: cumulative sum of `N(0, step²)` increments drawn
///   row-major (`t` outer, channel inner), starting from the first draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub periods: Vec<f64>,
    pub amplitudes: Vec<f64>,
    pub noise: f64,
    pub step: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            periods: vec![24.0, 12.0, 48.0],
            amplitudes: vec![1.0, 0.5, 0.25],
            noise: 0.1,
            step: 1.0,
        }
    }
}

/// Hourly timestamps starting at 2016-07-01 00:00:00.
pub fn hourly_timestamps(t: usize) -> Vec<String> {
    let start = NaiveDateTime::parse_from_str("2016-07-01 00:00:00", TIMESTAMP_FORMATS[0])
        .expect("valid literal");
    (0..t)
        .map(|i| {
            (start + chrono::Duration::hours(i as i64))
                .format(TIMESTAMP_FORMATS[0])
                .to_string()
        })
        .collect()
}

pub fn synth_generate(kind: SynthKind, t: usize, n: usize, seed: u64) -> Result<SeriesFrame> {
    synth_generate_with(kind, t, n, seed, &SynthParams::default())
}

pub fn synth_generate_with(
    kind: SynthKind,
    t: usize,
    n: usize,
    seed: u64,
    p: &SynthParams,
) -> Result<SeriesFrame> {
    if t == 0 || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "synthetic series needs T, n ≥ 1, got {t}, {n}"
        )));
    }
    if p.periods.is_empty() || p.periods.iter().any(|&q| !(q > 0.0)) {
        return Err(Error::InvalidArgument("periods must be positive and non-empty".into()));
    }
    if p.amplitudes.len() != p.periods.len() {
        return Err(Error::InvalidArgument(format!(
            "{} amplitudes for {} periods",
            p.amplitudes.len(),
            p.periods.len()
        )));
    }
    if !(p.noise >= 0.0 && p.step >= 0.0) {
        return Err(Error::InvalidArgument("noise and step must be non-negative".into()));
    }
    let mut rng = rng_for(seed, &[streams::SYNTH]);
    let tau = std::f64::consts::TAU;
    let k = p.periods.len();
    let mut data = vec![0.0; t * n];
    match kind {
        SynthKind::SineMix => {
            let phases: Vec<f64> = (0..n * k).map(|_| rng.gen_range(0.0..tau)).collect();
            for (i, v) in data.iter_mut().enumerate() {
                let (row, c) = (i / n, i % n);
                *v = (0..k)
                    .map(|j| {
                        let period = p.periods[(c + j) % k];
                        p.amplitudes[j] * (tau * row as f64 / period + phases[c * k + j]).sin()
                    })
                    .sum();
            }
            add_noise(&mut data, p.noise, &mut rng);
        }
        SynthKind::TrendSeason => {
            let trends: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..=2.0)).collect();
            let phases: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..tau)).collect();
            for (i, v) in data.iter_mut().enumerate() {
                let (row, c) = (i / n, i % n);
                let period = p.periods[c % k];
                *v = trends[c] * row as f64 / t as f64
                    + (tau * row as f64 / period + phases[c]).sin();
            }
            add_noise(&mut data, p.noise, &mut rng);
        }
        SynthKind::RandomWalk => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for i in 0..t * n {
                let inc = p.step * normal.sample(&mut rng);
                data[i] = if i < n { inc } else { data[i - n] + inc };
            }
        }
    }
    SeriesFrame::new(
        Some(hourly_timestamps(t)),
        Tensor::new(vec![t, n], data)?,
        (0..n).map(|c| format!("c{c}")).collect(),
    )
}

fn add_noise<R: Rng>(data: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("non-negative sigma");
    for v in data {
        *v += normal.sample(rng);
    }
}
