//! Coarse-to-fine HDR video reconstruction from LDR sequences captured with
//! alternating exposures.
//!
//! The pipeline has two learned stages. The coarse stage aligns neighboring
//! frames with optical flow in the image space and fuses them with predicted
//! blending weights in the linear radiance domain. The refine stage extracts
//! features from three coarse HDR frames, aligns the neighbors to the center
//! with pyramid-cascaded deformable convolutions, fuses them with temporal
//! attention and decodes a residual reconstruction that replaces the coarse
//! result in badly exposed regions.
//!
//! Supporting modules cover the radiometric math, global similarity
//! alignment, synthetic dataset generation, training, sliding-window video
//! reconstruction and mu-law PSNR evaluation.

pub mod autodiff;
pub mod coarsenet;
pub mod datagen;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod harness;
pub mod nn;
pub mod radiometry;
pub mod raster;
pub mod refinenet;
pub mod tensor;

pub use error::{Error, Result};
