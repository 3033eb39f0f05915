//! Speech-biomarker screening toolkit.
//!
//! The crate covers the full desk-scale pipeline for Parkinson's-disease
//! screening from a read-aloud pangram: classical acoustic features, ingestion
//! of pretrained speech embeddings, projection-based fusion classifiers trained
//! from scratch, evaluation, subgroup bias testing, cohort error analysis and
//! hyperparameter search. A synthetic cohort generator stands in for the
//! clinical data so every stage can be exercised end to end.
//!
//! Data-parallel inner loops (mini-batch gradients, tuner trials, cross
//! validation folds, batch feature extraction) run on rayon when the default
//! `parallel` feature is enabled and fall back to plain iterators otherwise.
//! Results are identical either way.

pub mod acoustic;
pub mod dataset;
pub mod error;
pub mod error_analysis;
pub mod exec;
pub mod hypertune;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Exec;
