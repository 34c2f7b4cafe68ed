//! Sliding-window HDR video reconstruction.
//!
//! Every frame gets a coarse estimate (boundary windows mirror their missing
//! neighbors); frames with a full five-frame raw neighborhood additionally
//! run the refine stage and are merged under the well-exposed mask. Frames
//! whose sides are not multiples of the network factor are replicate-padded
//! internally and cropped back afterwards.

use std::time::Instant;

use crate::coarsenet::{coarse_forward, CoarseModel, COARSE_FACTOR};
use crate::datagen::LdrSequence;
use crate::error::{Error, Result};
use crate::frame::{ExposureRole, LdrFrame, RadianceFrame};
use crate::geometry::{estimate_similarity, warp_similarity};
use crate::raster::ImageBuf;
use crate::refinenet::{refine_forward, RefineModel};

#[derive(Debug, Clone, Copy, Default)]
pub struct ReconstructOptions {
    /// Apply global similarity alignment of the window neighbors onto the
    /// reference before the coarse stage.
    pub align: bool,
    /// Seed for the alignment consensus loop.
    pub align_seed: u64,
}

/// One reconstructed frame with its provenance.
#[derive(Debug, Clone)]
pub struct ReconstructedFrame {
    pub index: usize,
    pub radiance: RadianceFrame,
    /// False for boundary frames that carry the coarse result only.
    pub refined: bool,
    pub role: ExposureRole,
}

/// Reconstruct the whole sequence; returns the frames plus the measured
/// wall-clock milliseconds per frame.
pub fn reconstruct_video(
    coarse: &CoarseModel,
    refine: Option<&RefineModel>,
    sequence: &LdrSequence,
    opts: &ReconstructOptions,
) -> Result<(Vec<ReconstructedFrame>, f64)> {
    let period = sequence.schedule().period();
    if coarse.period != period {
        return Err(Error::config(format!(
            "model was trained for period {} but the sequence has period {period}",
            coarse.period
        )));
    }
    let min_len = if period == 2 { 5 } else { 7 };
    if sequence.len() < min_len {
        return Err(Error::data(format!(
            "sequence too short: {} frames, need at least {min_len} for period {period}",
            sequence.len()
        )));
    }

    let n = sequence.len();
    let started = Instant::now();

    // Coarse pass over every frame, mirroring missing boundary neighbors.
    let mut coarse_frames: Vec<RadianceFrame> = Vec::with_capacity(n);
    for i in 0..n {
        let prev = &sequence.frames()[mirror(i as isize - 1, n)];
        let reference = &sequence.frames()[i];
        let next = &sequence.frames()[mirror(i as isize + 1, n)];
        let window = if opts.align {
            [
                align_onto(prev, reference, opts.align_seed)?,
                reference.clone(),
                align_onto(next, reference, opts.align_seed)?,
            ]
        } else {
            [prev.clone(), reference.clone(), next.clone()]
        };
        coarse_frames.push(run_coarse_padded(coarse, &window)?);
    }

    let mut outputs = Vec::with_capacity(n);
    for i in 0..n {
        let role = sequence.schedule().role_for(i);
        // Refinement requires the full raw five-frame neighborhood so all
        // three coarse inputs come from unmirrored windows.
        let refinable = i >= 2 && i + 2 < n;
        match (refine, refinable) {
            (Some(refine_model), true) => {
                let window = [
                    coarse_frames[i - 1].clone(),
                    coarse_frames[i].clone(),
                    coarse_frames[i + 1].clone(),
                ];
                let merged = run_refine_padded(refine_model, &window, &sequence.frames()[i], role)?;
                outputs.push(ReconstructedFrame {
                    index: i,
                    radiance: merged,
                    refined: true,
                    role,
                });
            }
            _ => outputs.push(ReconstructedFrame {
                index: i,
                radiance: coarse_frames[i].clone(),
                refined: false,
                role,
            }),
        }
    }

    let ms_per_frame = started.elapsed().as_secs_f64() * 1000.0 / n as f64;
    Ok((outputs, ms_per_frame))
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i.clamp(0, n - 1) as usize
}

fn align_onto(frame: &LdrFrame, reference: &LdrFrame, seed: u64) -> Result<LdrFrame> {
    let estimate = estimate_similarity(frame, reference, seed)?;
    if estimate.degenerate {
        return Ok(frame.clone());
    }
    frame.with_pixels(warp_similarity(frame.pixels(), &estimate.transform))
}

fn pad_to_multiple(img: &ImageBuf, factor: usize) -> (ImageBuf, usize, usize) {
    let (h, w, c) = img.dims();
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    if ph == h && pw == w {
        return (img.clone(), h, w);
    }
    let padded = ImageBuf::from_fn(ph, pw, c, |y, x, ch| {
        img.get(y.min(h - 1), x.min(w - 1), ch)
    });
    (padded, h, w)
}

fn run_coarse_padded(model: &CoarseModel, window: &[LdrFrame; 3]) -> Result<RadianceFrame> {
    let (h, w, _) = window[1].dims();
    if h % COARSE_FACTOR == 0 && w % COARSE_FACTOR == 0 {
        return coarse_forward(model, window);
    }
    let padded: Vec<LdrFrame> = window
        .iter()
        .map(|f| {
            let (img, _, _) = pad_to_multiple(f.pixels(), COARSE_FACTOR);
            f.with_pixels(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = coarse_forward(
        model,
        &[padded[0].clone(), padded[1].clone(), padded[2].clone()],
    )?;
    RadianceFrame::new(out.pixels().crop(0, 0, h, w)?)
}

fn run_refine_padded(
    model: &RefineModel,
    window: &[RadianceFrame; 3],
    reference_ldr: &LdrFrame,
    role: ExposureRole,
) -> Result<RadianceFrame> {
    let (h, w, _) = window[1].dims();
    if h % COARSE_FACTOR == 0 && w % COARSE_FACTOR == 0 {
        return refine_forward(model, window, reference_ldr, role);
    }
    let padded: Vec<RadianceFrame> = window
        .iter()
        .map(|f| {
            let (img, _, _) = pad_to_multiple(f.pixels(), COARSE_FACTOR);
            RadianceFrame::new(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let (ldr_img, _, _) = pad_to_multiple(reference_ldr.pixels(), COARSE_FACTOR);
    let padded_ldr = reference_ldr.with_pixels(ldr_img)?;
    let out = refine_forward(
        model,
        &[padded[0].clone(), padded[1].clone(), padded[2].clone()],
        &padded_ldr,
        role,
    )?;
    RadianceFrame::new(out.pixels().crop(0, 0, h, w)?)
}
