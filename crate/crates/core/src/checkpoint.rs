//! Versioned JSON checkpoint: configuration echo, named weights, the
//! normalizer fitted on the training split and the frozen index memory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::memory::{Aggregation, AttentionIndexMemory, SiteEntry};
use crate::models::{Model, ModelConfig, ParamStore};
use crate::train::TrainConfig;

pub const FORMAT: &str = "lstf-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySegment {
    pub mode: Aggregation,
    pub entries: Vec<SiteEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub normalizer: Normalizer,
    pub memory: Option<MemorySegment>,
    pub channel_names: Vec<String>,
    /// Source data file, when training read one.
    pub data_path: Option<String>,
}

impl Checkpoint {
    pub fn new(
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        model: &Model,
        normalizer: &Normalizer,
        memory: Option<&AttentionIndexMemory>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let memory = memory
            .map(|m| {
                Ok::<_, Error>(MemorySegment {
                    mode: m.mode(),
                    entries: m.entries()?,
                })
            })
            .transpose()?;
        Ok(Self {
            format: FORMAT.to_owned(),
            version: FORMAT_VERSION,
            model: model_cfg.clone(),
            train: train_cfg.clone(),
            params: model.params().clone(),
            normalizer: normalizer.clone(),
            memory,
            channel_names,
            data_path: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let ckpt: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != FORMAT {
            return Err(Error::Checkpoint(format!(
                "{}: format tag {:?}, expected {FORMAT:?}",
                path.display(),
                ckpt.format
            )));
        }
        if ckpt.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {}",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and loads the stored weights into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.model, self.train.seed)?;
        model.params_mut().load_from(&self.params)?;
        Ok(model)
    }

    pub fn memory(&self) -> Result<Option<AttentionIndexMemory>> {
        self.memory
            .as_ref()
            .map(|m| AttentionIndexMemory::from_entries(m.mode, m.entries.clone()))
            .transpose()
    }
}
