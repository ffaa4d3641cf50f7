//! Weight-sharing architecture search for U-Net segmentation blocks,
//! polymorphic over spatial rank 1 and 2.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and wall-clock timing live in the `enas-unet` companion crate.

#![no_std]
extern crate alloc;

pub mod autodiff;
pub mod controller;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod search;
pub mod search_space;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
