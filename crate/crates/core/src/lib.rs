//! Multimodal claim verification: passage retrieval over embedding stores
//! and a dual-branch transformer classifier trained from scratch.

pub mod corpus;
pub mod eda;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use corpus::{ClaimDocPair, Dataset, Label, Split};
pub use embedding::{EmbeddingStore, EmbeddingVector};
pub use error::{Error, Result};
pub use metrics::{Metrics, confusion_matrix, prf1};
pub use model::{ModelConfig, ModelInput, VeracityModel};
pub use retrieval::{EvidenceSnippet, RetrievalConfig};
pub use training::{TrainConfig, TrainHistory};
