//! Weakly supervised ordinal severity estimation from video-level labels.
//!
//! Bags are videos with a single severity grade (0-3); instances are frames.
//! The crate trains frame scorers under the multi-instance assumption, lifts
//! them to ordinal predictions through a ranked binary ensemble or ordinal
//! regression, tunes aggregation thresholds, and reports agreement metrics.

pub mod dataset;
pub mod error;
pub mod metrics;
pub mod mil;
pub mod ordinal;
pub mod pipeline;
pub mod qcfilter;
pub mod scorer;

pub use error::{Error, Result};
