//! Language-based temporal moment localization in untrimmed videos.
//!
//! Candidate clips are cut from a video timeline, each clip is scored against
//! a query by a two-stream multi-modal fusion network (low-level visual
//! features vs. the sentence embedding, high-level visual concepts vs. the
//! verb/object embedding), and the best-scoring clips are refined by predicted
//! boundary offsets. Pretrained feature extractors are decoupled behind the
//! `MMLF` binary feature archive; everything downstream of the archive lives
//! here.

pub mod commands;
pub mod config;
pub mod data_model;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod network;
pub mod proposals;
pub mod seeds;
pub mod sweep;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
