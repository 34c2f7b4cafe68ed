//! Scalar and per-pixel radiometric conversions.
//!
//! Everything here is deterministic and elementwise: LDR to radiance and
//! back, mu-law range compression, the well-exposed masks used for the final
//! merge, and a Reinhard preview tonemap. The LDR/radiance pair follows
//! `I = L^gamma / t` and `g(I) = clip((I t)^(1/gamma))`.

use crate::error::{Error, Result};
use crate::frame::{ExposureRole, LdrFrame, RadianceFrame, TonemappedFrame, WellExposedMask};
use crate::raster::ImageBuf;

/// Lower threshold of the well-exposed band; below it a low-exposure
/// reference pixel counts as underexposed.
pub const WELL_EXPOSED_LOW: f64 = 0.15;

/// Upper threshold of the well-exposed band; above it a high-exposure
/// reference pixel counts as saturated.
pub const WELL_EXPOSED_HIGH: f64 = 0.9;

/// Convert a gamma-encoded frame to linear radiance: `I = L^gamma / t`.
pub fn ldr_to_radiance(frame: &LdrFrame) -> Result<RadianceFrame> {
    let t = frame.exposure_t();
    let gamma = frame.gamma();
    let pixels = frame.pixels().map(|l| l.powf(gamma) / t);
    RadianceFrame::new(pixels)
}

/// Scalar core of [`radiance_to_ldr`], exposed for oracles and data
/// generation: `clip((i * t)^(1/gamma))`.
#[inline]
pub fn render_ldr_value(i: f64, exposure_t: f64, gamma: f64) -> f64 {
    (i * exposure_t).powf(1.0 / gamma).clamp(0.0, 1.0)
}

/// Re-render radiance at a given exposure: `g(I) = clip((I t)^(1/gamma))`.
///
/// This is the exposure adjustment used both to prepare flow-network inputs
/// and to synthesize training LDRs from HDR sources.
pub fn radiance_to_ldr(frame: &RadianceFrame, exposure_t: f64, gamma: f64) -> Result<LdrFrame> {
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
    let pixels = frame
        .pixels()
        .map(|i| render_ldr_value(i, exposure_t, gamma));
    LdrFrame::new(pixels, exposure_t, gamma)
}

/// Scalar mu-law compression: `log(1 + mu h) / log(1 + mu)`.
#[inline]
pub fn mu_tonemap_value(h: f64, mu: f64) -> f64 {
    (1.0 + mu * h).ln() / (1.0 + mu).ln()
}

/// Inverse of [`mu_tonemap_value`].
#[inline]
pub fn mu_expand_value(t: f64, mu: f64) -> f64 {
    ((1.0 + mu).ln() * t).exp_m1() / mu
}

/// Mu-law compress a radiance frame.
pub fn mu_tonemap(frame: &RadianceFrame, mu: f64) -> Result<TonemappedFrame> {
    if mu <= 0.0 || !mu.is_finite() {
        return Err(Error::invalid(format!(
            "mu must be a positive finite number, got {mu}"
        )));
    }
    // RadianceFrame already guarantees nonnegative finite pixels.
    let pixels = frame.pixels().map(|h| mu_tonemap_value(h, mu));
    Ok(TonemappedFrame::new_unchecked(pixels, mu))
}

/// Mu-law compress a raw buffer, validating nonnegativity.
pub fn mu_tonemap_buf(pixels: &ImageBuf, mu: f64) -> Result<ImageBuf> {
    if mu <= 0.0 || !mu.is_finite() {
        return Err(Error::invalid(format!(
            "mu must be a positive finite number, got {mu}"
        )));
    }
    if pixels.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid(
            "mu-law input must be nonnegative and finite".to_string(),
        ));
    }
    Ok(pixels.map(|h| mu_tonemap_value(h, mu)))
}

/// Scalar well-exposedness weight for a single channel value.
#[inline]
pub fn well_exposed_weight(l: f64, role: ExposureRole) -> f64 {
    let low = WELL_EXPOSED_LOW;
    let high = WELL_EXPOSED_HIGH;
    let under = if l < low { (l / low) * (l / low) } else { 1.0 };
    let over = if l > high {
        let r = (1.0 - l) / (1.0 - high);
        r * r
    } else {
        1.0
    };
    match role {
        ExposureRole::Low => under,
        ExposureRole::High => over,
        ExposureRole::Middle => under * over,
    }
}

/// Per-pixel confidence that the reference frame is well exposed.
///
/// Low-exposure references fall off quadratically below 0.15, high-exposure
/// references above 0.9 and middle references at both ends. Per-channel
/// weights are reduced to one channel by the minimum, so a single clipped
/// channel marks the whole pixel.
pub fn well_exposed_mask(frame: &LdrFrame, role: ExposureRole) -> Result<WellExposedMask> {
    let (h, w, c) = frame.dims();
    let weights = ImageBuf::from_fn(h, w, 1, |y, x, _| {
        (0..c)
            .map(|ch| well_exposed_weight(frame.pixels().get(y, x, ch), role))
            .fold(1.0, f64::min)
    });
    WellExposedMask::new(weights)
}

/// Global Reinhard curve `x / (1 + x)`.
#[inline]
pub fn reinhard_value(x: f64) -> f64 {
    x / (1.0 + x)
}

/// Reinhard preview tonemap: radiance is scaled so its 99th percentile maps
/// to 1, then compressed per channel with `x / (1 + x)`.
///
/// Preview only; losses and metrics never use this.
pub fn display_tonemap(frame: &RadianceFrame) -> Result<TonemappedFrame> {
    let p99 = frame.pixels().percentile(0.99);
    let scale = if p99 > 0.0 { 1.0 / p99 } else { 1.0 };
    let pixels = frame.pixels().map(|h| reinhard_value(h * scale));
    Ok(TonemappedFrame::new_unchecked(pixels, 0.0))
}
