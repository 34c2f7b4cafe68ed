//! Frame-level domain types.
//!
//! An [`LdrFrame`] is a gamma-encoded capture together with its relative
//! exposure; a [`RadianceFrame`] is linear light. Conversions between the two
//! live in [`crate::radiometry`]. Invariants (value ranges, positivity) are
//! enforced at construction so downstream code can rely on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::ImageBuf;

/// Fixed gamma used to replace the camera response curve.
pub const GAMMA: f64 = 2.2;

/// Compression level of the mu-law tonemap used for losses and PSNR.
pub const MU: f64 = 5000.0;

/// Gamma-encoded image in [0, 1] with its relative exposure.
#[derive(Debug, Clone, PartialEq)]
pub struct LdrFrame {
    pixels: ImageBuf,
    exposure_t: f64,
    gamma: f64,
}

impl LdrFrame {
    pub fn new(pixels: ImageBuf, exposure_t: f64, gamma: f64) -> Result<Self> {
        if exposure_t <= 0.0 || !exposure_t.is_finite() {
            return Err(Error::invalid(format!(
                "exposure must be a positive finite number, got {exposure_t}"
            )));
        }
        if gamma <= 0.0 || !gamma.is_finite() {
            return Err(Error::invalid(format!(
                "gamma must be a positive finite number, got {gamma}"
            )));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "LDR pixel values must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Self {
            pixels,
            exposure_t,
            gamma,
        })
    }

    /// Construct with the default gamma of 2.2.
    pub fn with_default_gamma(pixels: ImageBuf, exposure_t: f64) -> Result<Self> {
        Self::new(pixels, exposure_t, GAMMA)
    }

    pub fn pixels(&self) -> &ImageBuf {
        &self.pixels
    }

    pub fn exposure_t(&self) -> f64 {
        self.exposure_t
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.pixels.dims()
    }

    /// Replace the pixel buffer, revalidating the range invariant.
    pub fn with_pixels(&self, pixels: ImageBuf) -> Result<Self> {
        Self::new(pixels, self.exposure_t, self.gamma)
    }
}

/// Linear-domain nonnegative image (relative radiance).
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceFrame {
    pixels: ImageBuf,
}

impl RadianceFrame {
    pub fn new(pixels: ImageBuf) -> Result<Self> {
        if !pixels.is_finite() {
            return Err(Error::invalid("radiance values must be finite".to_string()));
        }
        if pixels.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(
                "radiance values must be nonnegative".to_string(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &ImageBuf {
        &self.pixels
    }

    pub fn into_pixels(self) -> ImageBuf {
        self.pixels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.pixels.dims()
    }
}

/// Mu-law (or display) compressed image.
#[derive(Debug, Clone, PartialEq)]
pub struct TonemappedFrame {
    pixels: ImageBuf,
    mu: f64,
}

impl TonemappedFrame {
    pub(crate) fn new_unchecked(pixels: ImageBuf, mu: f64) -> Self {
        Self { pixels, mu }
    }

    pub fn pixels(&self) -> &ImageBuf {
        &self.pixels
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// Per-pixel confidence (in [0, 1]) that the reference LDR value is usable.
#[derive(Debug, Clone, PartialEq)]
pub struct WellExposedMask {
    weights: ImageBuf,
}

impl WellExposedMask {
    pub fn new(weights: ImageBuf) -> Result<Self> {
        if weights.channels() != 1 {
            return Err(Error::shape("mask must be single-channel".to_string()));
        }
        if weights.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "mask weights must lie in [0, 1]".to_string(),
            ));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &ImageBuf {
        &self.weights
    }
}

/// Position of a frame's exposure within the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExposureRole {
    Low,
    Middle,
    High,
}

impl ExposureRole {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(ExposureRole::Low),
            "middle" => Ok(ExposureRole::Middle),
            "high" => Ok(ExposureRole::High),
            other => Err(Error::invalid(format!("unknown exposure role: {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ExposureRole::Low => "low",
            ExposureRole::Middle => "middle",
            ExposureRole::High => "high",
        }
    }
}

/// Per-pixel 2D displacement map; channel 0 is dx, channel 1 is dy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    displacements: ImageBuf,
}

impl FlowField {
    pub fn new(displacements: ImageBuf) -> Result<Self> {
        if displacements.channels() != 2 {
            return Err(Error::shape(
                "flow field must have two channels (dx, dy)".to_string(),
            ));
        }
        if !displacements.is_finite() {
            return Err(Error::invalid("flow field must be finite".to_string()));
        }
        Ok(Self { displacements })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            displacements: ImageBuf::zeros(height, width, 2),
        }
    }

    pub fn displacements(&self) -> &ImageBuf {
        &self.displacements
    }

    pub fn dx(&self, y: usize, x: usize) -> f64 {
        self.displacements.get(y, x, 0)
    }

    pub fn dy(&self, y: usize, x: usize) -> f64 {
        self.displacements.get(y, x, 1)
    }

    pub fn height(&self) -> usize {
        self.displacements.height()
    }

    pub fn width(&self) -> usize {
        self.displacements.width()
    }
}
