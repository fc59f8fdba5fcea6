//! Learning a shared embedding space for images and text.
//!
//! Two modality towers map precomputed feature vectors onto a common unit
//! sphere. A single classification layer is shared by both towers, a
//! semantic graph built from class-name embeddings regularizes pairwise
//! distances, and a gap term pulls paired image/text embeddings together.
//! The crate also ships the evaluation protocols (recall@K, hierarchical
//! precision@K, fused classification) and a synthetic hierarchical data
//! generator for small-scale experiments.

pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod semgraph;
pub mod trainer;
mod tsv;

use serde::{Deserialize, Serialize};

pub use data::{Manifest, Split, SyntheticSpec, TripleDataset};
pub use error::{HuseError, Result};
pub use evaluator::{ClassificationReport, EmbeddedCorpus, RetrievalReport};
pub use losses::{LossBreakdown, LossMode, LossWeights, SigmaRule};
pub use model::{HuseModel, Modality, TowerConfig};
pub use numerics::{Matrix, RngState};
pub use semgraph::{ClassEmbeddings, SemanticGraph, Taxonomy};
pub use trainer::{TrainConfig, TrainHistory};

/// How reductions inside a single computation are scheduled.
///
/// Both modes produce bit-identical results: parallel work is split per
/// row and partial results are combined in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}
