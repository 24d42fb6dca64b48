//! Training, evaluation, prediction, ablation and plotting for the
//! grounding model, behind the `vtg` command line.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod optim;
pub mod plot;
pub mod predict;
pub mod train;

pub use error::{HarnessError, Result};

/// The guide's code blocks, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    struct Overview;
    #[doc = include_str!("../../../book/src/data.md")]
    struct Data;
    #[doc = include_str!("../../../book/src/anchors.md")]
    struct Anchors;
    #[doc = include_str!("../../../book/src/gates.md")]
    struct Gates;
    #[doc = include_str!("../../../book/src/losses.md")]
    struct Losses;
    #[doc = include_str!("../../../book/src/metrics.md")]
    struct Metrics;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
}
