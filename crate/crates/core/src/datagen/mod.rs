//! Synthetic training-data machinery: exposure schedules, LDR sequence
//! synthesis from HDR sources, augmentation, static-scene ground-truth
//! merging and LDRs-HDR pair assembly.

pub mod export;
pub mod io;
pub mod manifest;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frame::{ExposureRole, LdrFrame, RadianceFrame, GAMMA};
use crate::geometry::{warp_similarity, SimilarityTransform};
use crate::radiometry::radiance_to_ldr;
use crate::raster::ImageBuf;

/// Periodic exposure schedule; relative exposure values indexed cyclically.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSchedule {
    exposures: Vec<f64>,
}

impl ExposureSchedule {
    pub fn new(exposures: Vec<f64>) -> Result<Self> {
        if exposures.len() != 2 && exposures.len() != 3 {
            return Err(Error::invalid(format!(
                "schedule period must be 2 or 3, got {}",
                exposures.len()
            )));
        }
        if exposures.iter().any(|&t| t <= 0.0 || !t.is_finite()) {
            return Err(Error::invalid("exposures must be positive".to_string()));
        }
        Ok(Self { exposures })
    }

    /// Build from EV stops: EV k maps to an exposure of 2^k relative to 1.
    pub fn from_ev_stops(stops: &[f64]) -> Result<Self> {
        Self::new(stops.iter().map(|&s| 2f64.powf(s)).collect())
    }

    pub fn period(&self) -> usize {
        self.exposures.len()
    }

    pub fn exposures(&self) -> &[f64] {
        &self.exposures
    }

    /// Exposure of frame `index` under cyclic indexing.
    pub fn exposure_for(&self, index: usize) -> f64 {
        self.exposures[index % self.exposures.len()]
    }

    /// Role of frame `index`: its exposure's rank within the schedule.
    pub fn role_for(&self, index: usize) -> ExposureRole {
        let t = self.exposure_for(index);
        let min = self.exposures.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self
            .exposures
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if t <= min {
            ExposureRole::Low
        } else if t >= max {
            ExposureRole::High
        } else {
            ExposureRole::Middle
        }
    }
}

/// An ordered run of frames whose exposures follow a cyclic schedule.
#[derive(Debug, Clone)]
pub struct LdrSequence {
    frames: Vec<LdrFrame>,
    schedule: ExposureSchedule,
}

impl LdrSequence {
    pub fn new(frames: Vec<LdrFrame>, schedule: ExposureSchedule) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("sequence must be nonempty".to_string()));
        }
        let dims = frames[0].dims();
        for (i, frame) in frames.iter().enumerate() {
            if frame.dims() != dims {
                return Err(Error::shape(format!(
                    "frame {i} has dimensions {:?}, expected {:?}",
                    frame.dims(),
                    dims
                )));
            }
            let expected = schedule.exposure_for(i);
            if (frame.exposure_t() - expected).abs() > 1e-9 * expected {
                return Err(Error::invalid(format!(
                    "frame {i} exposure {} does not follow the schedule slot {}",
                    frame.exposure_t(),
                    expected
                )));
            }
        }
        Ok(Self { frames, schedule })
    }

    pub fn frames(&self) -> &[LdrFrame] {
        &self.frames
    }

    pub fn schedule(&self) -> &ExposureSchedule {
        &self.schedule
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// A training pair: a window of alternating-exposure frames plus the HDR
/// ground truth for its center frame.
#[derive(Debug, Clone)]
pub struct LdrsHdrPair {
    pub inputs: LdrSequence,
    pub target: RadianceFrame,
    pub reference_role: ExposureRole,
}

impl LdrsHdrPair {
    pub fn new(
        inputs: LdrSequence,
        target: RadianceFrame,
        reference_role: ExposureRole,
    ) -> Result<Self> {
        let n = inputs.len();
        if n != 5 && n != 7 {
            return Err(Error::invalid(format!(
                "pair windows hold 5 or 7 frames, got {n}"
            )));
        }
        let (h, w, _) = inputs.frames()[0].dims();
        if target.dims() != (h, w, 3) {
            return Err(Error::shape(format!(
                "target {:?} does not match inputs {h}x{w}",
                target.dims()
            )));
        }
        Ok(Self {
            inputs,
            target,
            reference_role,
        })
    }

    pub fn center_index(&self) -> usize {
        self.inputs.len() / 2
    }

    pub fn reference(&self) -> &LdrFrame {
        &self.inputs.frames()[self.center_index()]
    }
}

/// Render an HDR clip into an alternating-exposure LDR sequence; frame `i`
/// uses schedule slot `i mod period` and the fixed gamma of 2.2.
pub fn synthesize_sequence(
    hdr_frames: &[RadianceFrame],
    schedule: &ExposureSchedule,
) -> Result<LdrSequence> {
    if hdr_frames.is_empty() {
        return Err(Error::invalid(
            "cannot synthesize from an empty clip".to_string(),
        ));
    }
    let frames = hdr_frames
        .iter()
        .enumerate()
        .map(|(i, hdr)| radiance_to_ldr(hdr, schedule.exposure_for(i), GAMMA))
        .collect::<Result<Vec<_>>>()?;
    LdrSequence::new(frames, schedule.clone())
}

/// Augmentation settings. The defaults mirror the training recipe: Gaussian
/// noise of sigma 1e-3 in the linear domain, reference tone perturbation by
/// gamma = exp(d) with d uniform in [-0.7, 0.7], random flips/rotation and a
/// 256x256 crop.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    pub noise_sigma: f64,
    pub tone_jitter: f64,
    pub flips: bool,
    /// Square crop size; 0 disables cropping. Frames smaller than the crop
    /// are kept whole.
    pub crop: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 1e-3,
            tone_jitter: 0.7,
            flips: true,
            crop: 256,
        }
    }
}

impl AugmentConfig {
    /// Identity augmentation: all effects disabled.
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            tone_jitter: 0.0,
            flips: false,
            crop: 0,
        }
    }
}

/// Deterministically augment a pair. Noise is added to every input frame in
/// the linear measurement domain (`m = L^gamma`, noise on `m`, re-encode),
/// so in radiance units low exposures come out noisier. Tone perturbation
/// applies to the reference input only. Geometric ops hit inputs and target
/// alike.
pub fn augment(pair: &LdrsHdrPair, seed: u64, config: &AugmentConfig) -> Result<LdrsHdrPair> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let center = pair.center_index();

    let mut frames: Vec<LdrFrame> = Vec::with_capacity(pair.inputs.len());
    for frame in pair.inputs.frames() {
        let noisy = if config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, config.noise_sigma)
                .map_err(|e| Error::invalid(format!("bad noise sigma: {e}")))?;
            let gamma = frame.gamma();
            let pixels = frame.pixels().map(|l| {
                let m = l.powf(gamma) + normal.sample(&mut rng);
                m.clamp(0.0, 1.0).powf(1.0 / gamma)
            });
            frame.with_pixels(pixels)?
        } else {
            frame.clone()
        };
        frames.push(noisy);
    }

    if config.tone_jitter > 0.0 {
        let d = rng.random_range(-config.tone_jitter..=config.tone_jitter);
        let gamma_pert = d.exp();
        let reference = &frames[center];
        let pixels = reference.pixels().map(|l| l.powf(gamma_pert));
        frames[center] = reference.with_pixels(pixels)?;
    }

    let mut target = pair.target.pixels().clone();
    if config.flips {
        let flip_h = rng.random_bool(0.5);
        let flip_v = rng.random_bool(0.5);
        let rotate = rng.random_bool(0.5);
        let apply = |img: &ImageBuf| {
            let mut out = img.clone();
            if flip_h {
                out = out.flip_horizontal();
            }
            if flip_v {
                out = out.flip_vertical();
            }
            if rotate {
                out = out.rotate90();
            }
            out
        };
        for frame in &mut frames {
            *frame = frame.with_pixels(apply(frame.pixels()))?;
        }
        target = apply(&target);
    }

    if config.crop > 0 {
        let (h, w, _) = frames[0].dims();
        let ch = config.crop.min(h);
        let cw = config.crop.min(w);
        let top = if h > ch {
            rng.random_range(0..=h - ch)
        } else {
            0
        };
        let left = if w > cw {
            rng.random_range(0..=w - cw)
        } else {
            0
        };
        for frame in &mut frames {
            *frame = frame.with_pixels(frame.pixels().crop(top, left, ch, cw)?)?;
        }
        target = target.crop(top, left, ch, cw)?;
    }

    let inputs = LdrSequence::new(frames, pair.inputs.schedule().clone())?;
    LdrsHdrPair::new(inputs, RadianceFrame::new(target)?, pair.reference_role)
}

/// Merge same-exposure stacks of a static scene into a ground-truth HDR
/// frame.
///
/// Frames sharing an exposure are averaged to reduce noise, each average is
/// linearized, and the exposures are fused with the triangle weight
/// `1 - |2L - 1|` evaluated on the averaged LDR values. Pixels where every
/// exposure is fully clipped fall back to the exposure whose LDR value is
/// nearest 0.5.
pub fn merge_static_gt(stacks: &[(f64, Vec<LdrFrame>)]) -> Result<RadianceFrame> {
    if stacks.len() < 2 {
        return Err(Error::invalid(
            "static merge needs at least two exposures".to_string(),
        ));
    }
    for (i, (t_a, _)) in stacks.iter().enumerate() {
        for (t_b, _) in stacks.iter().skip(i + 1) {
            if (t_a - t_b).abs() < 1e-12 {
                return Err(Error::invalid(
                    "static merge needs distinct exposures".to_string(),
                ));
            }
        }
    }

    let mut averaged: Vec<(f64, ImageBuf)> = Vec::with_capacity(stacks.len());
    let mut dims = None;
    for (exposure, frames) in stacks {
        if frames.is_empty() {
            return Err(Error::invalid(
                "every exposure needs at least one frame".to_string(),
            ));
        }
        for frame in frames {
            if (frame.exposure_t() - exposure).abs() > 1e-9 * exposure {
                return Err(Error::invalid(format!(
                    "frame exposure {} does not match its stack exposure {exposure}",
                    frame.exposure_t()
                )));
            }
            match dims {
                None => dims = Some(frame.dims()),
                Some(d) if frame.dims() == d => {}
                Some(d) => {
                    return Err(Error::shape(format!(
                        "stack frame dims {:?} do not match {:?}",
                        frame.dims(),
                        d
                    )))
                }
            }
        }
        let (h, w, c) = frames[0].dims();
        let mut acc = ImageBuf::zeros(h, w, c);
        for frame in frames {
            for (a, &v) in acc.data_mut().iter_mut().zip(frame.pixels().data()) {
                *a += v;
            }
        }
        let n = frames.len() as f64;
        acc = acc.map(|v| v / n);
        averaged.push((*exposure, acc));
    }

    let (h, w, c) = {
        let (_, img) = &averaged[0];
        img.dims()
    };
    let triangle = |l: f64| 1.0 - (2.0 * l - 1.0).abs();
    let out = ImageBuf::from_fn(h, w, c, |y, x, ch| {
        let mut num = 0.0;
        let mut den = 0.0;
        for (t, img) in &averaged {
            let l = img.get(y, x, ch);
            let weight = triangle(l);
            let radiance = l.powf(GAMMA) / t;
            num += weight * radiance;
            den += weight;
        }
        if den > 0.0 {
            num / den
        } else {
            // All exposures clipped: take the one closest to mid-gray.
            let (mut best_rad, mut best_dist) = (0.0, f64::INFINITY);
            for (t, img) in &averaged {
                let l = img.get(y, x, ch);
                let dist = (l - 0.5).abs();
                if dist < best_dist {
                    best_dist = dist;
                    best_rad = l.powf(GAMMA) / t;
                }
            }
            best_rad
        }
    });
    RadianceFrame::new(out)
}

/// Cut stride-1 and stride-2 windows around a static center frame, both
/// sharing the same ground truth. Windows hold 5 frames for two-exposure
/// schedules and 7 for three-exposure. Out-of-bounds windows are skipped;
/// the second element of the return value counts them.
pub fn build_dynamic_pairs(
    sequence: &LdrSequence,
    static_center_index: usize,
    gt: &RadianceFrame,
) -> Result<(Vec<LdrsHdrPair>, usize)> {
    if static_center_index >= sequence.len() {
        return Err(Error::invalid(format!(
            "center index {static_center_index} out of range"
        )));
    }
    let period = sequence.schedule().period();
    let window = if period == 2 { 5usize } else { 7 };
    let half = window / 2;
    let role = sequence.schedule().role_for(static_center_index);

    let mut pairs = Vec::new();
    let mut skipped = 0;
    for stride in [1usize, 2] {
        let reach = half * stride;
        if static_center_index < reach || static_center_index + reach >= sequence.len() {
            skipped += 1;
            continue;
        }
        let indices: Vec<usize> = (0..window)
            .map(|k| static_center_index - reach + k * stride)
            .collect();
        let frames: Vec<LdrFrame> = indices
            .iter()
            .map(|&i| sequence.frames()[i].clone())
            .collect();
        // The window's own cyclic schedule, read off its first `period`
        // frames. Stride 2 under a two-exposure schedule degenerates to a
        // constant schedule, which is still valid.
        let exposures: Vec<f64> = (0..period).map(|j| frames[j].exposure_t()).collect();
        let schedule = ExposureSchedule::new(exposures)?;
        let inputs = LdrSequence::new(frames, schedule)?;
        pairs.push(LdrsHdrPair::new(inputs, gt.clone(), role)?);
    }
    Ok((pairs, skipped))
}

/// Smooth synthetic radiance scene in [0, 1]: a mid-tone texture with a few
/// bright highlight blobs and dark pockets, so every exposure of a 2- or
/// 3-stop schedule sees clipped, under-exposed and well-exposed content.
pub fn synthetic_radiance_scene(height: usize, width: usize, seed: u64) -> RadianceFrame {
    let base = crate::geometry::synthetic_texture(height, width, seed);
    let blobs = crate::geometry::synthetic_texture(height, width, seed.wrapping_add(101));
    let pixels = ImageBuf::from_fn(height, width, 3, |y, x, c| {
        let b = base.get(y, x, 0);
        let hot = blobs.get(y, x, 0);
        // Squaring the base pushes a real fraction of pixels into the dark
        // range that reads as under-exposed at unit exposure; highlight
        // blobs reach toward 1 and clip at the long exposure.
        let mut v = 0.002 + 0.30 * b * b;
        if hot > 0.72 {
            v += (hot - 0.72) / 0.28 * 0.7;
        }
        let tint = 1.0 + 0.04 * (c as f64 - 1.0);
        (v * tint).clamp(0.0, 1.0)
    });
    RadianceFrame::new(pixels).expect("synthetic scene is valid radiance")
}

/// A short clip of the synthetic scene drifting by a constant per-frame
/// translation (zero drift gives a static clip).
pub fn synthetic_radiance_video(
    height: usize,
    width: usize,
    count: usize,
    seed: u64,
    dx_per_frame: f64,
    dy_per_frame: f64,
) -> Vec<RadianceFrame> {
    let scene = synthetic_radiance_scene(height, width, seed);
    (0..count)
        .map(|i| {
            if dx_per_frame == 0.0 && dy_per_frame == 0.0 {
                scene.clone()
            } else {
                let t = SimilarityTransform::translation(
                    dx_per_frame * i as f64,
                    dy_per_frame * i as f64,
                );
                RadianceFrame::new(warp_similarity(scene.pixels(), &t))
                    .expect("warped radiance stays valid")
            }
        })
        .collect()
}
