//! Attribute-factored item representations for recommenders.
//!
//! Instead of one free vector per item, items are addressed by coordinates in
//! a small tensor of shared attribute values: explicit axes read off the
//! catalog (category, price bucket) and implicit axes learned from behavior.
//! A user's preference for an item is the product of per-axis preference
//! probabilities, so the parameter budget scales with the sum of axis sizes
//! rather than the item count, and unseen items inherit strength from their
//! attribute values.
//!
//! The crate covers the full pipeline: catalog ingestion and leave-one-out
//! splitting ([`catalog`]), the attribute tensor and matching-based item
//! placement ([`allocation`], [`assignment`]), shared embedding tables and
//! score kernels ([`embedding`], [`lstm`]), the factored and baseline models
//! ([`models`]), the alternating trainer ([`trainer`]), AUC evaluation with
//! cold-start splits ([`evaluation`]), checkpoints ([`checkpoint`]), config
//! files ([`config`]) and a planted-structure generator for end-to-end tests
//! ([`synthetic`]).

pub mod allocation;
pub mod assignment;
pub mod catalog;
pub mod checkpoint;
pub mod config;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod lstm;
pub mod models;
pub mod synthetic;
pub mod trainer;

pub use error::{DirError, Result};

/// Probabilities are clamped to at least this before a logarithm, keeping
/// losses and matching weights finite even for starved cells.
pub const PROB_FLOOR: f64 = 1e-12;
