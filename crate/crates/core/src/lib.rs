//! Evaluation and sensitivity-analysis toolkit for binary segmentation models.
//!
//! The crate is organised around the stages of a model-selection study:
//!
//! - [`mask`]: binary masks, slice stacks, preprocessing and dataset splits.
//! - [`metrics`]: overlap indices (Dice, F-score, IOU), RMSE, losses and the
//!   Hausdorff distance, plus batch averaging.
//! - [`fitting`]: exponential convergence fits of per-epoch traces and planar
//!   scaling surfaces over training/testing set sizes.
//! - [`sweep`]: the experiment harness (grids, repeated trials, predictors,
//!   reproducibility statistics, index sensitivity).
//! - [`volume`]: longitudinal volume estimation from segmented stacks.
//! - [`report`]: the library side of the `segsense` command line.

pub mod error;
pub mod fitting;
pub mod mask;
pub mod metrics;
pub mod report;
pub mod sweep;
pub mod volume;

mod seed;

pub use error::{Error, Result};

/// Version string recorded in every provenance record.
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
