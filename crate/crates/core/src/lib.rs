//! Intervention-anchored forecasting of wearable physiology.
//!
//! The pipeline turns raw wearable exports and user-logged intervention tags
//! into minute-level features, anchors 120-minute forecast targets at each
//! intervention end, trains a multi-horizon quantile Transformer, calibrates
//! its median into signed directional calls, and scores those calls.

pub mod domain;
pub mod error;
pub mod features;
pub mod ingest;
pub mod labeling;
pub mod model;
pub mod calibration;
pub mod evaluation;
pub mod patterns;
pub mod synth;
pub mod pipeline;

pub use error::{Error, Result};
