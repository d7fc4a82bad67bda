//! Training loop, evaluation and the index-reuse benchmark.
//!
//! Each step builds one graph per sample (in parallel) and reduces the
//! per-sample gradients in batch order, so results do not depend on the
//! thread count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::OpCounters;
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::{make_windows, split_ett, ForecastWindow, Normalizer, SeriesFrame};
use crate::error::{Error, Result};
use crate::loss::{
    deep_supervised_loss, loss_var, pointwise_mean, HeadWeights, LossConfig, MetricAccumulator,
    Metrics,
};
use crate::memory::{AttentionIndexMemory, StabilityRow};
use crate::models::informer::decoder_input;
use crate::models::{Model, ModelConfig, ModelKind, Selection, SiteSelection};
use crate::optim::{clip_grad_norm, lr_at_epoch, Adam, AdamConfig, EarlyStopping, StopDecision};
use crate::rng::{derive_seed, rng_for, streams};
use crate::tensor::Tensor;

pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

/// Sub-stream tags under [`streams::SAMPLING`].
const VAL_STREAM: u64 = 0x7661;
const BENCH_STREAM: u64 = 0x6265;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub loss: LossConfig,
    /// MLinear only: supervise the CI and CD heads as well as the mix.
    pub deep_supervision: bool,
    pub head_weights: HeadWeights,
    /// Global gradient-norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Step between consecutive training windows.
    pub stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            lr_decay: 0.5,
            batch_size: 32,
            patience: 3,
            max_epochs: 8,
            adam: AdamConfig::default(),
            seed: 0,
            loss: LossConfig::default(),
            deep_supervision: true,
            head_weights: HeadWeights::default(),
            grad_clip: None,
            stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_owned()));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.stride == 0 {
            return bad("batch_size, max_epochs and stride must be at least 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        self.loss.validate()
    }
}

/// Normalized windows of the three splits.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub normalizer: Normalizer,
    pub channel_names: Vec<String>,
    pub split_rows: (usize, usize, usize),
    pub proportional_split: bool,
    pub train: Vec<ForecastWindow>,
    pub val: Vec<ForecastWindow>,
    pub test: Vec<ForecastWindow>,
}

/// Splits `frame`, fits the normalizer on the training rows only and cuts
/// windows. Validation and test windows always use stride 1.
pub fn prepare(frame: &SeriesFrame, model_cfg: &ModelConfig, stride: usize) -> Result<Prepared> {
    if frame.channels() != model_cfg.channels {
        return Err(Error::InvalidArgument(format!(
            "data has {} channels, model expects {}",
            frame.channels(),
            model_cfg.channels
        )));
    }
    let splits = split_ett(frame)?;
    let normalizer = Normalizer::fit(&splits.train)?;
    let (l, s) = (model_cfg.lookback, model_cfg.horizon);
    let windows = |f: &SeriesFrame, stride: usize| {
        make_windows(&normalizer.normalize_frame(f)?, l, s, stride)
    };
    let prep = Prepared {
        channel_names: frame.channel_names().to_vec(),
        split_rows: splits.lens(),
        proportional_split: splits.proportional,
        train: windows(&splits.train, stride)?,
        val: windows(&splits.val, 1)?,
        test: windows(&splits.test, 1)?,
        normalizer,
    };
    for (name, w, rows) in [
        ("training", &prep.train, prep.split_rows.0),
        ("validation", &prep.val, prep.split_rows.1),
        ("test", &prep.test, prep.split_rows.2),
    ] {
        if w.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "empty {name} split: {rows} rows cannot hold one window of L + S = {}",
                l + s
            )));
        }
    }
    Ok(prep)
}

/// Forecast for one lookback window. MLinear ignores `sel`.
pub fn forecast(
    model: &Model,
    lookback: &Tensor,
    sel: Selection<'_>,
    counters: &mut OpCounters,
) -> Result<(Tensor, Vec<SiteSelection>)> {
    match model {
        Model::Mlinear(m) => Ok((m.predict(lookback, counters)?, Vec::new())),
        Model::InformerLite(m) => m.predict(lookback, sel, counters),
    }
}

struct SampleOut {
    loss: f64,
    grads: Vec<Tensor>,
    counters: OpCounters,
    used: Vec<SiteSelection>,
}

fn sample_step(model: &Model, w: &ForecastWindow, cfg: &TrainConfig, seed: u64) -> Result<SampleOut> {
    let mut g = Graph::new();
    let mut counters = OpCounters::default();
    let b = model.params().bind(&mut g);
    let x = g.constant(w.lookback.clone());
    let y = g.constant(w.target.clone());
    let (loss, used) = match model {
        Model::Mlinear(m) => {
            let heads = m.forward(&mut g, &b, x, &mut counters)?;
            let weights = cfg.deep_supervision.then_some(cfg.head_weights);
            let l = deep_supervised_loss(
                &mut g,
                (heads.ci, heads.cd, heads.mix),
                y,
                &cfg.loss,
                weights,
            )?;
            (l.total, Vec::new())
        }
        Model::InformerLite(m) => {
            let d = m.dims();
            let dec = g.constant(decoder_input(&w.lookback, d.label_len, d.horizon)?);
            let (out, used) =
                m.forward(&mut g, &b, x, dec, Selection::Measure { seed }, &mut counters)?;
            (loss_var(&mut g, out, y, &cfg.loss)?, used)
        }
    };
    g.backward(loss)?;
    Ok(SampleOut {
        loss: g.value(loss).data()[0],
        grads: model.params().grads(&g, &b),
        counters,
        used,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCounters {
    pub train: OpCounters,
    pub val: OpCounters,
    pub test: OpCounters,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub train_secs: f64,
    pub val_secs: f64,
    pub test_secs: f64,
}

#[derive(Clone, Debug)]
pub struct FitSummary {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_counters: OpCounters,
    pub val_counters: OpCounters,
    pub train_secs: f64,
    pub val_secs: f64,
}

/// Mean configured loss of the final forecast over `windows`.
fn validation_loss(
    model: &Model,
    windows: &[ForecastWindow],
    cfg: &TrainConfig,
    counters: &mut OpCounters,
) -> Result<f64> {
    let outs = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut c = OpCounters::default();
            let seed = derive_seed(cfg.seed, &[streams::SAMPLING, VAL_STREAM, i as u64]);
            let (pred, _) = forecast(model, &w.lookback, Selection::Measure { seed }, &mut c)?;
            Ok((pointwise_mean(&pred, &w.target, cfg.loss.pointwise())?, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (l, c) in &outs {
        total += l;
        counters.merge(c);
    }
    Ok(total / windows.len() as f64)
}

/// Optimizes `model` in place. On return the model holds the weights of
/// the best validation epoch and, for InformerLite, `memory` holds every
/// recorded index set and is frozen.
pub fn fit(
    model: &mut Model,
    memory: &mut AttentionIndexMemory,
    prep: &Prepared,
    cfg: &TrainConfig,
) -> Result<FitSummary> {
    cfg.validate()?;
    if prep.train.is_empty() || prep.val.is_empty() {
        return Err(Error::InvalidArgument("empty training or validation split".into()));
    }
    let mut adam = Adam::new(cfg.adam);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params().clone();
    let mut summary = FitSummary {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        train_counters: OpCounters::default(),
        val_counters: OpCounters::default(),
        train_secs: 0.0,
        val_secs: 0.0,
    };
    let mut iteration = 0;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_at_epoch(cfg.lr0, cfg.lr_decay, epoch);
        let mut order: Vec<usize> = (0..prep.train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[streams::SHUFFLE, epoch as u64]));
        let started = Instant::now();
        let mut loss_sum = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let outs = batch
                .par_iter()
                .enumerate()
                .map(|(k, &wi)| {
                    let path = [streams::SAMPLING, epoch as u64, step as u64, k as u64];
                    sample_step(model, &prep.train[wi], cfg, derive_seed(cfg.seed, &path))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads: Vec<Tensor> = model
                .params()
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for out in outs {
                if !out.loss.is_finite() {
                    return Err(Error::Divergence { epoch, step });
                }
                loss_sum += out.loss;
                summary.train_counters.merge(&out.counters);
                for (acc, g) in grads.iter_mut().zip(&out.grads) {
                    acc.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, b)| *a += b);
                }
                for s in out.used {
                    memory.record(s.key, s.l_q, epoch, iteration, &s.indices)?;
                }
                iteration += 1;
            }
            let inv = 1.0 / batch.len() as f64;
            grads
                .iter_mut()
                .for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= inv));
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max_norm);
            }
            adam.step(model.params_mut().tensors_mut(), &grads, lr)?;
        }
        summary.train_secs += started.elapsed().as_secs_f64();

        let started = Instant::now();
        let val_loss = validation_loss(model, &prep.val, cfg, &mut summary.val_counters)?;
        summary.val_secs += started.elapsed().as_secs_f64();
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: order.len().div_ceil(cfg.batch_size),
            });
        }
        summary.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / prep.train.len() as f64,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best = model.params().clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                summary.stopped_early = true;
                break;
            }
        }
    }
    summary.best_epoch = stopper.best_epoch().unwrap_or(0);
    model.params_mut().load_from(&best)?;
    if model.kind() == ModelKind::InformerLite {
        memory.freeze();
    }
    Ok(summary)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub windows: usize,
    /// Metrics on z-scored values (the default comparison scale).
    pub normalized: Metrics,
    /// Metrics after undoing the normalization.
    pub raw: Metrics,
}

/// Predictions for every window (frozen memory reused for InformerLite)
/// and their metrics. `windows` must be normalized with `normalizer`.
pub fn evaluate_windows(
    model: &Model,
    memory: Option<&AttentionIndexMemory>,
    windows: &[ForecastWindow],
    normalizer: &Normalizer,
    counters: &mut OpCounters,
) -> Result<(EvalReport, Vec<Tensor>)> {
    let outs = windows
        .par_iter()
        .map(|w| {
            let mut c = OpCounters::default();
            let pred = model.predict(&w.lookback, memory, &mut c)?;
            Ok((pred, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut norm = MetricAccumulator::default();
    let mut raw = MetricAccumulator::default();
    let mut preds = Vec::with_capacity(outs.len());
    for ((pred, c), w) in outs.into_iter().zip(windows) {
        counters.merge(&c);
        norm.push(&pred, &w.target)?;
        raw.push(&normalizer.denormalize(&pred)?, &normalizer.denormalize(&w.target)?)?;
        preds.push(pred);
    }
    Ok((
        EvalReport {
            windows: windows.len(),
            normalized: norm.finish(),
            raw: raw.finish(),
        },
        preds,
    ))
}

/// Windows of a raw (unnormalized) split, normalized with the checkpoint's
/// training statistics.
pub fn checkpoint_windows(ckpt: &Checkpoint, split: &SeriesFrame) -> Result<Vec<ForecastWindow>> {
    let frame = ckpt.normalizer.normalize_frame(split)?;
    let windows = make_windows(&frame, ckpt.model.lookback, ckpt.model.horizon, 1)?;
    if windows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split of {} rows holds no window of L + S = {}",
            split.len(),
            ckpt.model.lookback + ckpt.model.horizon
        )));
    }
    Ok(windows)
}

pub fn evaluate(ckpt: &Checkpoint, split: &SeriesFrame) -> Result<EvalReport> {
    let model = ckpt.model()?;
    let memory = ckpt.memory()?;
    let windows = checkpoint_windows(ckpt, split)?;
    let mut counters = OpCounters::default();
    Ok(evaluate_windows(&model, memory.as_ref(), &windows, &ckpt.normalizer, &mut counters)?.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub rows: usize,
    pub channels: usize,
    pub split_rows: (usize, usize, usize),
    pub proportional_split: bool,
    pub train_windows: usize,
    pub val_windows: usize,
    pub test_windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub model: ModelKind,
    pub config: ConfigEcho,
    pub data: DataSummary,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test: EvalReport,
    pub counters: PhaseCounters,
    pub stability: Vec<StabilityRow>,
    /// The only non-reproducible fields.
    pub wall_clock: PhaseTiming,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub memory: Option<AttentionIndexMemory>,
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

/// Trains a fresh model on `frame`, restores the best validation weights
/// and evaluates them on the test split.
pub fn train(model_cfg: &ModelConfig, frame: &SeriesFrame, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    let prep = prepare(frame, model_cfg, cfg.stride)?;
    let mut model = Model::new(model_cfg, cfg.seed)?;
    let mut memory = model_cfg.new_memory();
    let fit = fit(&mut model, &mut memory, &prep, cfg)?;
    let memory = (model.kind() == ModelKind::InformerLite).then_some(memory);

    let started = Instant::now();
    let mut test_counters = OpCounters::default();
    let (test, _) = evaluate_windows(
        &model,
        memory.as_ref(),
        &prep.test,
        &prep.normalizer,
        &mut test_counters,
    )?;
    let test_secs = started.elapsed().as_secs_f64();
    if !(test.normalized.mse.is_finite() && test.normalized.mae.is_finite()) {
        return Err(Error::Divergence {
            epoch: fit.best_epoch,
            step: 0,
        });
    }

    let checkpoint = Checkpoint::new(
        model_cfg,
        cfg,
        &model,
        &prep.normalizer,
        memory.as_ref(),
        prep.channel_names.clone(),
    )?;
    let report = RunReport {
        version: VERSION.to_owned(),
        model: model.kind(),
        config: ConfigEcho {
            model: model_cfg.clone(),
            train: cfg.clone(),
        },
        data: DataSummary {
            rows: frame.len(),
            channels: frame.channels(),
            split_rows: prep.split_rows,
            proportional_split: prep.proportional_split,
            train_windows: prep.train.len(),
            val_windows: prep.val.len(),
            test_windows: prep.test.len(),
        },
        epochs: fit.epochs,
        best_epoch: fit.best_epoch,
        stopped_early: fit.stopped_early,
        test,
        counters: PhaseCounters {
            train: fit.train_counters,
            val: fit.val_counters,
            test: test_counters,
        },
        stability: memory
            .as_ref()
            .map(AttentionIndexMemory::stability_report)
            .unwrap_or_default(),
        wall_clock: PhaseTiming {
            train_secs: fit.train_secs,
            val_secs: fit.val_secs,
            test_secs,
        },
    };
    Ok(TrainOutcome {
        model,
        memory,
        checkpoint,
        report,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub recompute_secs: f64,
    pub reuse_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub windows: usize,
    /// Measured counters with the sparsity measurement run at every site.
    pub recompute: OpCounters,
    /// Measured counters with the frozen memory's indices.
    pub reuse: OpCounters,
    /// Closed-form counters for the same passes.
    pub expected_recompute: OpCounters,
    pub expected_reuse: OpCounters,
    /// Largest element-wise difference between the two modes' forecasts.
    pub max_abs_diff: f64,
    /// Windows whose recomputed indices matched the memory at every site.
    pub matching_windows: usize,
    /// Whether every matching window produced bit-identical forecasts.
    pub matching_identical: bool,
    pub wall_clock: BenchTiming,
}

/// Runs InformerLite prediction on every window of `split` twice: with
/// fresh measurement at every site and with the checkpoint's memory.
pub fn bench_reuse(ckpt: &Checkpoint, split: &SeriesFrame, max_windows: Option<usize>) -> Result<BenchReport> {
    let Model::InformerLite(model) = ckpt.model()? else {
        return Err(Error::InvalidArgument(
            "bench compares index reuse and needs an informer_lite checkpoint".into(),
        ));
    };
    let memory = ckpt
        .memory()?
        .ok_or_else(|| Error::Checkpoint("informer_lite checkpoint without memory".into()))?;
    let mut windows = checkpoint_windows(ckpt, split)?;
    if let Some(m) = max_windows {
        windows.truncate(m.max(1));
    }

    let mut recompute = OpCounters::default();
    let mut fresh = Vec::with_capacity(windows.len());
    let started = Instant::now();
    for (i, w) in windows.iter().enumerate() {
        let seed = derive_seed(ckpt.train.seed, &[streams::SAMPLING, BENCH_STREAM, i as u64]);
        fresh.push(model.predict(&w.lookback, Selection::Measure { seed }, &mut recompute)?);
    }
    let recompute_secs = started.elapsed().as_secs_f64();

    let mut reuse = OpCounters::default();
    let mut reused = Vec::with_capacity(windows.len());
    let started = Instant::now();
    for w in &windows {
        reused.push(model.predict(&w.lookback, Selection::Reuse(&memory), &mut reuse)?.0);
    }
    let reuse_secs = started.elapsed().as_secs_f64();

    let mut max_abs_diff: f64 = 0.0;
    let mut matching_windows = 0;
    let mut matching_identical = true;
    for ((pred, used), other) in fresh.iter().zip(&reused) {
        let diff = pred.max_abs_diff(other);
        max_abs_diff = max_abs_diff.max(diff);
        let same = used
            .iter()
            .all(|s| memory.aggregate(s.key).is_ok_and(|idx| idx == s.indices));
        if same {
            matching_windows += 1;
            matching_identical &= pred.data() == other.data();
        }
    }

    let n = windows.len() as u64;
    let scale = |c: OpCounters| OpCounters {
        measurement_dot_products: c.measurement_dot_products * n,
        attention_dot_products: c.attention_dot_products * n,
        multiplies_total: c.multiplies_total * n,
    };
    let attn = *model.attention_config();
    let expected_recompute = scale(model.counter_formula(true, |key| {
        attn.top_u(model.dims().site_len(key.layer))
    }));
    let expected_reuse = scale(model.counter_formula(false, |key| {
        memory.aggregate(key).map_or(0, |idx| idx.len())
    }));

    Ok(BenchReport {
        windows: windows.len(),
        recompute,
        reuse,
        expected_recompute,
        expected_reuse,
        max_abs_diff,
        matching_windows,
        matching_identical,
        wall_clock: BenchTiming {
            recompute_secs,
            reuse_secs,
        },
    })
}

