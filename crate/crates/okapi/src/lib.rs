//! Statistical matching and consistency training over embedding sets:
//! propensity-score-calipered cross-domain nearest neighbours
//! (CaliperNN), covariate-balance diagnostics, online memory-bank /
//! EMA machinery, and a desk-scale semi-supervised trainer on
//! synthetic multi-domain data.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod format;
pub mod matcher;
pub mod online;
pub mod propensity;
pub mod rng;
pub mod toy;
pub mod vecmath;

pub use data::{DomainLabel, EmbeddingSet, FilterReason, MatchRecord, Sample};
pub use error::{Error, Result};
pub use matcher::{CaliperParams, MatchDirection};
