//! Files, checkpoints and the command-line driver around `enas-unet-core`.
//!
//! Everything here needs `std`: DTEN tensor files, dataset and checkpoint
//! directories, run manifests, CSV reports and the `enas-unet` binary.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod dten;
mod error;
pub mod fsutil;
pub mod manifest;
pub mod report;

pub use enas_unet_core as core;
pub use error::{Error, Result};
