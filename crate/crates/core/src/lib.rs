//! Coarse-grained part network (CGPN) for person re-identification.
//!
//! The crate covers the model graph ([`network`]), strip partitioning
//! ([`partition`]), the training losses ([`losses`]), dataset ingestion and
//! sampling ([`data`]), retrieval metrics ([`evaluation`]) and the training
//! loop with its ablation variants ([`trainer`]).

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod network;
pub mod partition;
pub mod trainer;
pub mod variant;

pub use error::{Error, ErrorKind, Result};
pub use evaluation::{EvalProtocol, MetricsReport, RankingResult};
pub use network::{CgpnModel, EmbeddingBundle, FeatureSpec, ModelConfig, Role};
pub use partition::{FeatureMap, StripWindow};
pub use trainer::{TrainConfig, TrainSchedule, Trainer};
pub use variant::{Variant, VariantConfig};
