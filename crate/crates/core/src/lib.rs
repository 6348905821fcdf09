//! Differentiable multi-view image-based rendering with source-view-wise
//! feature aggregation.
//!
//! The crate is organized bottom-up:
//!
//! - [`adcore`]: tape-based reverse-mode differentiation over dense tensors,
//!   gradient checking and checkpoint I/O.
//! - [`geometry`]: pinhole cameras, rays, projection, bilinear sampling and
//!   depth sampling.
//! - [`aggregation`]: learnable similarity functions over per-view feature
//!   distances and the resulting weighted means and variances.
//! - [`network`]: feature extractor, direction features and density/color
//!   heads.
//! - [`renderer`]: volume compositing and coarse/fine rendering.
//! - [`training`]: loss, Adam, schedules, the training loop and variant
//!   comparisons.
//! - [`scene`] and [`metrics`]: toy-scene generation, the scene directory
//!   format, PSNR and SSIM.

pub mod adcore;
pub mod aggregation;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod network;
pub mod raster;
pub mod renderer;
pub mod scene;
pub mod training;

pub use adcore::{ParamStore, Tape, Tensor, Var};

pub use error::{Error, Result};


