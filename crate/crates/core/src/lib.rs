//! Long-sequence forecasting on a small reverse-mode autodiff core.
//!
//! Two model families share the core: [`InformerLite`], an encoder/decoder
//! with top-u sparse self-attention whose selected query positions are
//! recorded during training and reused at prediction time, and [`MLinear`],
//! channel-independent and channel-dependent linear heads mixed through
//! efficient attention.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod memory;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attention::{AttentionConfig, OpCounters};
pub use autodiff::{Graph, Var};
pub use checkpoint::Checkpoint;
pub use data::{Normalizer, SeriesFrame, SynthKind};
pub use error::{Error, Result};
pub use loss::{HeadWeights, LossConfig, LossKind, Metrics};
pub use memory::{Aggregation, AttentionIndexMemory, SiteKey};
pub use models::{InformerLite, MLinear, MappingKind, Model, ModelConfig, ModelKind};
pub use tensor::Tensor;
pub use train::{RunReport, TrainConfig};
