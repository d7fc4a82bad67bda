//! The two forecaster families and the configuration record driving them.

pub mod informer;
pub mod mlinear;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, OpCounters};
use crate::error::{Error, Result};
use crate::memory::{Aggregation, AttentionIndexMemory};
use crate::tensor::Tensor;

pub use informer::{InformerDims, InformerLite, Mode, Selection, SiteSelection};
pub use mlinear::{MLinear, MLinearDims, MLinearHeads, MappingKind};
pub use params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    InformerLite,
    #[default]
    Mlinear,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "informer_lite" => Ok(Self::InformerLite),
            "mlinear" => Ok(Self::Mlinear),
            other => Err(format!("expected informer_lite|mlinear, got {other:?}")),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::InformerLite => "informer_lite",
            Self::Mlinear => "mlinear",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    /// Known-history rows fed to the decoder; `None` means `lookback / 2`.
    pub label_len: Option<usize>,
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_mult: usize,
    pub attention: AttentionConfig,
    pub aggregation: Aggregation,
    pub warmup_epochs: usize,
    pub p_divisor: usize,
    pub mapping: MappingKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::default(),
            lookback: 96,
            horizon: 24,
            channels: 1,
            label_len: None,
            d_model: 16,
            n_heads: 2,
            ff_mult: 4,
            attention: AttentionConfig::default(),
            aggregation: Aggregation::default(),
            warmup_epochs: 1,
            p_divisor: 8,
            mapping: MappingKind::default(),
        }
    }
}

impl ModelConfig {
    pub fn label_len(&self) -> usize {
        self.label_len.unwrap_or(self.lookback / 2)
    }

    pub fn informer_dims(&self) -> InformerDims {
        InformerDims {
            channels: self.channels,
            lookback: self.lookback,
            label_len: self.label_len(),
            horizon: self.horizon,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ff_mult: self.ff_mult,
        }
    }

    pub fn mlinear_dims(&self) -> MLinearDims {
        MLinearDims {
            lookback: self.lookback,
            horizon: self.horizon,
            channels: self.channels,
            p_divisor: self.p_divisor,
            mapping: self.mapping,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.horizon == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "L, S and n must be positive, got {}, {}, {}",
                self.lookback, self.horizon, self.channels
            )));
        }
        if self.p_divisor == 0 {
            return Err(Error::InvalidArgument("p_divisor must be positive".into()));
        }
        self.attention.validate()
    }

    pub fn new_memory(&self) -> AttentionIndexMemory {
        AttentionIndexMemory::new(self.aggregation, self.warmup_epochs)
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    InformerLite(InformerLite),
    Mlinear(MLinear),
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            ModelKind::InformerLite => {
                Self::InformerLite(InformerLite::new(cfg.informer_dims(), cfg.attention, seed)?)
            }
            ModelKind::Mlinear => Self::Mlinear(MLinear::new(cfg.mlinear_dims(), seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::InformerLite(_) => ModelKind::InformerLite,
            Self::Mlinear(_) => ModelKind::Mlinear,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Self::InformerLite(m) => m.params(),
            Self::Mlinear(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::InformerLite(m) => m.params_mut(),
            Self::Mlinear(m) => m.params_mut(),
        }
    }

    /// Evaluation forecast for one lookback window. InformerLite reuses the
    /// frozen `memory`; MLinear ignores it and returns the mixed head.
    pub fn predict(
        &self,
        lookback: &Tensor,
        memory: Option<&AttentionIndexMemory>,
        counters: &mut OpCounters,
    ) -> Result<Tensor> {
        match self {
            Self::Mlinear(m) => m.predict(lookback, counters),
            Self::InformerLite(m) => {
                let mem = memory.ok_or(Error::MemoryNotFrozen)?;
                Ok(m.predict(lookback, Selection::Reuse(mem), counters)?.0)
            }
        }
    }
}
