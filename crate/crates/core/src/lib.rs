//! Multi-stream weakly supervised video anomaly detection with
//! teacher-to-student distillation.
//!
//! A multi-stream teacher is trained with a multiple-instance ranking loss,
//! its scores are refined into soft segment labels, and a single-stream
//! student is distilled from it at both the prediction and feature level.

pub mod dataio;
pub mod diffcore;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod miltrain;
pub mod models;
pub mod params;
pub mod pipeline;
pub mod refinery;
pub mod relattn;

pub use error::{Error, Result};
