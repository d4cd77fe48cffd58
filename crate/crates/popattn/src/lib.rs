//! Popularity classification for image posts with a dual-attention model.
//!
//! The pipeline turns raw posts (caption text, precomputed image feature
//! vectors, like counts) into per-user balanced labels, fits an LDA topic
//! model over training captions, aggregates per-user posting environments,
//! and trains a classifier that attends over caption words conditioned on
//! the image and gates the environment features. Analysis tools cluster
//! images by popularity ratio, score tokens, and export attention maps.
//!
//! Everything is seeded: the same inputs and seed reproduce every artifact
//! bit for bit.

pub mod analysis;
pub mod dataset;
pub mod environment;
pub mod error;
pub mod gradcheck;
pub mod lda;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
