//! Retrieval certainty scoring for product-quantized dense embeddings.
//!
//! A query's certainty combines how stably it quantizes under a trained
//! codebook with how dense its exact top-K neighborhood is. The crate also
//! ships a synthetic gravity-well corpus generator, a streaming quality
//! monitor with adaptive retrieval, and an evaluation harness.

pub mod certainty;
pub mod error;
pub mod eval;
pub mod format;
pub mod index;
pub mod monitor;
pub mod par;
pub mod pipeline;
pub mod pq;
pub mod sim;
pub mod stats;
pub mod types;

pub use certainty::{CertaintyScore, Combiner, Scorer, ScorerConfig, SigmaMode};
pub use error::{Error, Result};
pub use index::{build_index, Index, Neighbor, NeighborList};
pub use monitor::{AdaptivePolicy, Monitor, MonitorConfig};
pub use par::Execution;
pub use pq::{train_codebook, PqCode, PqCodebook, PqConfig};
pub use sim::{generate_instance, SimConfig, SyntheticInstance};
pub use types::{Embedding, EmbeddingSet, SquaredDistance};
