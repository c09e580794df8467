//! Credit-scoring toolkit: CSV ingest, coded-missing preprocessing, correlation
//! clustering and VIF pruning, ADASYN oversampling, tree ensembles, evaluation
//! metrics with payoff-based profit, and an end-to-end pipeline.

pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod featsel;
pub mod frame;
pub mod matrix;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod resample;
pub mod seed;
pub mod synthgen;

pub use error::{Error, Result};
