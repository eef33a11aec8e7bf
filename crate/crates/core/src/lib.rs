//! Pose-aware multi-level relation network for human-object interaction
//! detection: geometry, spatial configuration maps, feature pooling, the
//! relation head, training, evaluation and synthetic data.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod inference;
pub mod network;
pub mod nn;
pub mod scm;
pub mod training;

pub use config::{AblationFlags, ModelConfig, TrainConfig, TrainParams};
pub use error::DomainError;
pub use geometry::{BBox, GtPair, HoiProposal, Joint, Pose, NUM_JOINTS};
pub use network::{PmfNet, RelationPrediction, Sample};
