//! Images as sets of anisotropic 2D Gaussians, fitted with a differentiable
//! tile rasterizer and enhanced for low light by editing Gaussian colors in
//! place.
//!
//! The pipeline has two stages:
//!
//! 1. [`fit`] optimizes every primitive attribute so the rendered set
//!    reconstructs the input image.
//! 2. [`enhance`] freezes geometry and opacity and trains a per-image
//!    mixture of residual color operators against the unsupervised
//!    objective in [`losses`]. The result is baked back into the colors.

pub mod codec;
pub mod enhance;
pub mod error;
pub mod fit;
pub mod gaussian;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};
pub use gaussian::{Activated, Conic, GaussianSet};
pub use image::ImageBuffer;
pub use raster::{GaussianGradients, RasterOptions, TileIndex};
