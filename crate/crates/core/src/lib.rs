//! Desk-scale contrastive-reconstruction retrieval: synthetic catalog and
//! query-set generation, a toy interleaved multimodal encoder, the combined
//! contrastive + masked-reconstruction training objective, a deterministic
//! training loop, and a recall/MRR evaluation harness.
//!
//! Everything is seeded and single-threaded by default: the same config and
//! seed reproduce every artifact byte for byte.

pub mod catalog;
pub mod coral;
pub mod encoder;
pub mod eval;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use catalog::{Catalog, CatalogConfig, Product};
pub use coral::{CoralHyper, LossBreakdown};
pub use encoder::{EncoderConfig, InputMode, ModelParams};
pub use eval::MetricsReport;
pub use sampler::{Query, QuerySet, SamplerConfig};
pub use trainer::{AblationPreset, Checkpoint, FinetuneMode, TrainConfig};
