//! Stain classification of whole-slide images.
//!
//! Two pipelines share one taxonomy and one slide reader: patch features
//! aggregated by gated-attention MIL or probability voting, and a single-pass
//! classifier on a rotated, downscaled thumbnail.

pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod image;
pub mod interpretability;
pub mod aggregation;
pub mod backbone;
pub mod benchmark;
pub mod manifest;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod plot;
pub mod seed;
pub mod segmentation;
pub mod slide_io;
pub mod synthdata;
pub mod taxonomy;
pub mod thumbnail_classifier;
pub mod training;

pub use error::{Error, Result};
