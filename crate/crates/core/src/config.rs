//! Flat `key=value` view of [`ModelConfig`] and [`TrainConfig`], shared by
//! config files and command-line flags.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("model", "informer_lite | mlinear"),
    ("L", "lookback length"),
    ("S", "forecast horizon"),
    ("n", "channel count"),
    ("label_len", "decoder history rows, or auto for L/2"),
    ("d_model", "InformerLite width"),
    ("n_heads", "InformerLite heads per attention layer"),
    ("ff_mult", "feed-forward hidden width as a multiple of d_model"),
    ("u_factor", "active queries u = ceil(u_factor * ln L_Q)"),
    ("sample_factor", "sampled keys ceil(sample_factor * ln L_K)"),
    ("aggregation", "index memory aggregation: eq3_mean | frequency"),
    ("warmup_epochs", "epochs excluded from index aggregation"),
    ("p_divisor", "MLinear d_k = max(1, S / p_divisor)"),
    ("mapping", "MLinear mapping: sequence_mix | feature_mix"),
    ("lr0", "initial learning rate"),
    ("lr_decay", "learning-rate factor per epoch"),
    ("batch_size", "windows per optimizer step"),
    ("patience", "early-stopping patience in epochs"),
    ("max_epochs", "epoch limit"),
    ("adam_beta1", "Adam first-moment decay"),
    ("adam_beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam denominator offset"),
    ("seed", "run seed"),
    ("loss", "m_loss | huber | mae | mse"),
    ("sigma", "loss threshold"),
    ("deep_supervision", "supervise MLinear CI and CD heads too"),
    ("w_ci", "CI head loss weight"),
    ("w_cd", "CD head loss weight"),
    ("w_mix", "mixed head loss weight"),
    ("grad_clip", "gradient-norm bound, or none"),
    ("stride", "step between training windows"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::BadValue {
        key: key.to_owned(),
        value: value.to_owned(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::BadValue {
            key: key.to_owned(),
            value: value.to_owned(),
            reason: "expected true or false".into(),
        }),
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "model" => m.kind = parse(key, v)?,
            "L" => m.lookback = parse(key, v)?,
            "S" => m.horizon = parse(key, v)?,
            "n" => m.channels = parse(key, v)?,
            "label_len" => {
                m.label_len = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "d_model" => m.d_model = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "ff_mult" => m.ff_mult = parse(key, v)?,
            "u_factor" => m.attention.u_factor = parse(key, v)?,
            "sample_factor" => m.attention.sample_factor = parse(key, v)?,
            "aggregation" => m.aggregation = parse(key, v)?,
            "warmup_epochs" => m.warmup_epochs = parse(key, v)?,
            "p_divisor" => m.p_divisor = parse(key, v)?,
            "mapping" => m.mapping = parse(key, v)?,
            "lr0" => t.lr0 = parse(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "max_epochs" => t.max_epochs = parse(key, v)?,
            "adam_beta1" => t.adam.beta1 = parse(key, v)?,
            "adam_beta2" => t.adam.beta2 = parse(key, v)?,
            "adam_eps" => t.adam.eps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "loss" => t.loss.kind = parse(key, v)?,
            "sigma" => t.loss.sigma = parse(key, v)?,
            "deep_supervision" => t.deep_supervision = parse_bool(key, v)?,
            "w_ci" => t.head_weights.ci = parse(key, v)?,
            "w_cd" => t.head_weights.cd = parse(key, v)?,
            "w_mix" => t.head_weights.mix = parse(key, v)?,
            "grad_clip" => {
                t.grad_clip = if v == "none" { None } else { Some(parse(key, v)?) }
            }
            "stride" => t.stride = parse(key, v)?,
            other => return Err(Error::UnknownKey(other.to_owned())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t) = (&self.model, &self.train);
        Ok(match key {
            "model" => m.kind.to_string(),
            "L" => m.lookback.to_string(),
            "S" => m.horizon.to_string(),
            "n" => m.channels.to_string(),
            "label_len" => m.label_len.map_or("auto".into(), |l| l.to_string()),
            "d_model" => m.d_model.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "ff_mult" => m.ff_mult.to_string(),
            "u_factor" => m.attention.u_factor.to_string(),
            "sample_factor" => m.attention.sample_factor.to_string(),
            "aggregation" => m.aggregation.to_string(),
            "warmup_epochs" => m.warmup_epochs.to_string(),
            "p_divisor" => m.p_divisor.to_string(),
            "mapping" => m.mapping.to_string(),
            "lr0" => t.lr0.to_string(),
            "lr_decay" => t.lr_decay.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "patience" => t.patience.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "adam_beta1" => t.adam.beta1.to_string(),
            "adam_beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "seed" => t.seed.to_string(),
            "loss" => t.loss.kind.to_string(),
            "sigma" => t.loss.sigma.to_string(),
            "deep_supervision" => t.deep_supervision.to_string(),
            "w_ci" => t.head_weights.ci.to_string(),
            "w_cd" => t.head_weights.cd.to_string(),
            "w_mix" => t.head_weights.mix.to_string(),
            "grad_clip" => t.grad_clip.map_or("none".into(), |c| c.to_string()),
            "stride" => t.stride.to_string(),
            other => return Err(Error::UnknownKey(other.to_owned())),
        })
    }

    /// `(key, value)` for every key, in [`KEYS`] order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        KEYS.iter()
            .map(|&(k, _)| (k, self.get(k).expect("listed key")))
            .collect()
    }

    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }
}

/// Parses `key=value` lines. Blank lines and text after `#` are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("config line {}: expected key=value, got {raw:?}", i + 1))
        })?;
        let key = k.trim();
        if !KEYS.iter().any(|&(name, _)| name == key) {
            return Err(Error::UnknownKey(key.to_owned()));
        }
        out.push((key.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

pub fn load_config_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    parse_config_text(&std::fs::read_to_string(path)?)
}
