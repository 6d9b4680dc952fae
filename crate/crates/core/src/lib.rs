//! Report generation from unordered patch embeddings: token condensation,
//! retrieval from a sentence memory bank, and a mixture-of-experts decoder.

pub mod autograd;
pub mod checkpoint;
pub mod condense;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::{Profile, RunConfig};
pub use corpus::{Case, Corpus, CorpusSpec, Split, Vocabulary};
pub use decode::{DecodeConfig, Hypothesis};
pub use error::{Error, Result};
pub use memory::MemoryBank;
pub use metrics::MetricsReport;
pub use model::{Model, ModelConfig};
pub use moe::LoadStats;
pub use tensor::Matrix;
pub use train::{Example, TrainConfig};
