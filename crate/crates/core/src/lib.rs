//! Scaled intrusion-detection models on flow features, int8 post-training
//! quantization with an integer inference engine, and an analytical cost model
//! for an edge accelerator and an embedded CPU.
//!
//! Pipeline: [`dataset`] ingests and encodes flow records, [`model`] builds
//! the scaled feed-forward and CNN families, [`trainer`] fits them, then
//! [`quantizer`] produces int8 models that [`engine`] executes with integer
//! arithmetic while [`costmodel`] prices each inference per platform.
//! [`format`] holds the ENID model file layout.
//!
//! The `parallel` feature (on by default) runs batch loops on rayon; disabling
//! it falls back to sequential execution with bit-identical results.

pub mod costmodel;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod format;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod par;
pub mod quantizer;
pub mod trainer;

pub use error::{Error, Result};
