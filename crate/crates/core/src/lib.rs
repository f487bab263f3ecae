//! Minimum-spanning-tree dynamics of correlation networks.

pub mod corrnet;
pub mod error;
pub mod ingest;
pub mod kinetics;
pub mod laddersim;
pub mod observables;
pub mod phasefit;
pub mod pipeline;
pub mod snapshots;
pub mod synthgen;

pub use error::{Error, Result};
