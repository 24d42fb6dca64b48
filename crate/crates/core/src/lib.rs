//! Moment retrieval and highlight detection for untrimmed videos.
//!
//! A pooled text anchor steers gated cross-attention between clip and token
//! features; the refined clips feed a saliency head and a DETR-style moment
//! decoder.

pub mod anchor;
pub mod autograd;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod interaction;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod types;

pub use error::{Error, Result};
