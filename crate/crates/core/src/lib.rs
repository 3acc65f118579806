//! Landmark detection on periapical radiographs with a geometric prior.
//!
//! The crate covers the annotation schema, heatmap encoding and decoding,
//! line fitting with the geometric loss, evaluation metrics, a synthetic
//! data generator and a small reference trainer.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod ghmp;
pub mod heatmap;
pub mod losses;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod schema;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use schema::{AnnotationRecord, LandmarkId, LandmarkSet, LineGroupSchema, LossMode, Point, NUM_LANDMARKS};
