//! Building blocks for training and evaluating binary misinformation
//! classifiers on labeled claim corpora.
//!
//! The pipeline is split into independent stages:
//!
//! - [`corpus`]: loading, label normalization, seeded splitting and summary statistics.
//! - [`textprep`]: configurable text cleaning, loss audit and sequence-length selection.
//! - [`encoding`]: fixed-length token/mask batches and pluggable encoder backbones.
//! - [`models`]: the five classifier heads (recurrent, dense, hybrid) with manual backprop.
//! - [`training`]: binary cross-entropy, Adam, and the epoch loop with best-epoch selection.
//! - [`evaluation`]: confusion matrices, per-class metrics, and comparison tables.
//!
//! Every stage runs without pretrained weights through the deterministic `test`
//! encoder family, which is what the test suites use.

pub mod corpus;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod models;
pub mod params;
pub mod textprep;
pub mod training;

pub use error::{Error, Result};

/// Version tag written into every JSON document this crate produces.
pub const SCHEMA_VERSION: u32 = 1;
