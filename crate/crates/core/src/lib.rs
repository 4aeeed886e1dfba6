//! Dual attribute-aware ranking network (DARN) for cross-domain image
//! retrieval, at desk scale.
//!
//! Two domain-specific convolutional sub-networks share an architecture but
//! not their weights. Each carries one classification branch per attribute
//! category on top of its second fully connected layer, and a triplet ranking
//! loss ties the offline (street) sub-network to the online (shop) one. At
//! retrieval time features are L2-normalized per layer, reduced with PCA and
//! ranked by exact Euclidean distance.
//!
//! Module map:
//!
//! - [`autodiff`]: tensors with reverse-mode gradients and a finite-difference checker
//! - [`checks`]: gradient-check suite over the primitives and the full objective
//! - [`network`]: sub-network / dual-network assembly and checkpoints
//! - [`losses`]: attribute cross-entropy plus triplet ranking loss
//! - [`trainer`]: triplet sampling and SGD with momentum
//! - [`features`]: ranking-feature extraction, per-layer normalization, PCA
//! - [`index`]: exact nearest-neighbour gallery
//! - [`eval`]: top-k accuracy, attribute NDCG, ablation harness
//! - [`synth`]: synthetic paired dataset generator and loader

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod eval;
pub mod features;
pub mod index;
pub mod losses;
pub mod network;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
