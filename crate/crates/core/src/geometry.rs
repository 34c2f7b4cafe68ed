//! Spatial alignment primitives.
//!
//! Global alignment between neighboring frames is modeled as a similarity
//! transform (scale, rotation, translation) estimated from corner matches
//! with a seeded consensus loop. Warping is backward sampling with bilinear
//! interpolation and clamp-to-edge borders, so out-of-bounds reads never
//! inject zeros that would look underexposed downstream.

use crate::error::{Error, Result};
use crate::frame::{FlowField, LdrFrame};
use crate::radiometry::{ldr_to_radiance, radiance_to_ldr};
use crate::raster::ImageBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// 2D similarity transform: `p' = scale * R(rotation) * p + translation`.
///
/// Points are (x, y) pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            scale: 1.0,
            rotation: 0.0,
            tx,
            ty,
        }
    }

    /// Rotation by `angle` radians about an arbitrary center point.
    pub fn rotation_about(angle: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            scale: 1.0,
            rotation: angle,
            tx: cx - (c * cx - s * cy),
            ty: cy - (s * cx + c * cy),
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.rotation.sin_cos();
        (
            self.scale * (c * x - s * y) + self.tx,
            self.scale * (s * x + c * y) + self.ty,
        )
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let (s, c) = (-self.rotation).sin_cos();
        Self {
            scale: inv_scale,
            rotation: -self.rotation,
            tx: -inv_scale * (c * self.tx - s * self.ty),
            ty: -inv_scale * (s * self.tx + c * self.ty),
        }
    }

    /// `self` applied after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        let (tx, ty) = self.apply(other.tx, other.ty);
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation + other.rotation,
            tx,
            ty,
        }
    }
}

/// Result of [`estimate_similarity`]; `degenerate` is set when the inputs had
/// too little matchable structure and the identity was returned instead.
#[derive(Debug, Clone, Copy)]
pub struct SimilarityEstimate {
    pub transform: SimilarityTransform,
    pub degenerate: bool,
    pub inliers: usize,
    pub matches: usize,
}

/// Number of consensus iterations; fixed so estimation is deterministic for
/// a given seed.
const CONSENSUS_ITERS: usize = 200;
const INLIER_THRESHOLD_PX: f64 = 2.0;
const MAX_CORNERS: usize = 400;
const DESCRIPTOR_RADIUS: usize = 4;

/// Estimate the similarity transform that maps `src` onto `dst`.
///
/// The two frames may have different exposures; both are re-rendered at the
/// smaller exposure before corner detection so their intensities are
/// comparable. The consensus loop is seeded and therefore deterministic.
pub fn estimate_similarity(
    src: &LdrFrame,
    dst: &LdrFrame,
    seed: u64,
) -> Result<SimilarityEstimate> {
    if src.dims() != dst.dims() {
        return Err(Error::shape(format!(
            "similarity estimation needs equal dimensions, got {:?} vs {:?}",
            src.dims(),
            dst.dims()
        )));
    }

    let t_common = src.exposure_t().min(dst.exposure_t());
    let src_gray = to_matched_gray(src, t_common)?;
    let dst_gray = to_matched_gray(dst, t_common)?;

    let src_corners = harris_corners(&src_gray, MAX_CORNERS);
    let dst_corners = harris_corners(&dst_gray, MAX_CORNERS);

    let matches = match_corners(&src_gray, &src_corners, &dst_gray, &dst_corners);
    if matches.len() < 4 {
        return Ok(SimilarityEstimate {
            transform: SimilarityTransform::identity(),
            degenerate: true,
            inliers: 0,
            matches: matches.len(),
        });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut best_inliers: Vec<usize> = Vec::new();
    for _ in 0..CONSENSUS_ITERS {
        let a = rng.random_range(0..matches.len());
        let b = rng.random_range(0..matches.len());
        if a == b {
            continue;
        }
        let Some(candidate) = similarity_from_two(&matches[a], &matches[b]) else {
            continue;
        };
        let inliers: Vec<usize> = matches
            .iter()
            .enumerate()
            .filter(|(_, m)| {
                let (px, py) = candidate.apply(m.src.0, m.src.1);
                let dx = px - m.dst.0;
                let dy = py - m.dst.1;
                dx * dx + dy * dy < INLIER_THRESHOLD_PX * INLIER_THRESHOLD_PX
            })
            .map(|(i, _)| i)
            .collect();
        if inliers.len() > best_inliers.len() {
            best_inliers = inliers;
        }
    }

    if best_inliers.len() < 4 {
        return Ok(SimilarityEstimate {
            transform: SimilarityTransform::identity(),
            degenerate: true,
            inliers: best_inliers.len(),
            matches: matches.len(),
        });
    }

    let inlier_matches: Vec<&Match> = best_inliers.iter().map(|&i| &matches[i]).collect();
    let transform = fit_similarity(&inlier_matches).unwrap_or_else(SimilarityTransform::identity);

    Ok(SimilarityEstimate {
        transform,
        degenerate: false,
        inliers: best_inliers.len(),
        matches: matches.len(),
    })
}

/// Resample a buffer under a similarity transform: `out(p) = src(T^-1(p))`.
///
/// So `warp_similarity(src, T)` lands on top of `dst` when `T` maps src
/// coordinates to dst coordinates. Bilinear, clamp-to-edge.
pub fn warp_similarity(frame: &ImageBuf, transform: &SimilarityTransform) -> ImageBuf {
    let inv = transform.inverse();
    let (h, w, c) = frame.dims();
    ImageBuf::from_fn(h, w, c, |y, x, ch| {
        let (sx, sy) = inv.apply(x as f64, y as f64);
        frame.sample_bilinear(sy, sx, ch)
    })
}

/// Backward warp: `out(p) = frame(p + flow(p))`, bilinear, clamp-to-edge.
pub fn backward_warp(frame: &ImageBuf, flow: &FlowField) -> Result<ImageBuf> {
    let (h, w, c) = frame.dims();
    if flow.height() != h || flow.width() != w {
        return Err(Error::shape(format!(
            "flow {}x{} does not match frame {}x{}",
            flow.height(),
            flow.width(),
            h,
            w
        )));
    }
    Ok(ImageBuf::from_fn(h, w, c, |y, x, ch| {
        let sx = x as f64 + flow.dx(y, x);
        let sy = y as f64 + flow.dy(y, x);
        frame.sample_bilinear(sy, sx, ch)
    }))
}

// --- corner detection and matching -----------------------------------------

struct Corner {
    x: f64,
    y: f64,
    response: f64,
}

struct Match {
    src: (f64, f64),
    dst: (f64, f64),
}

fn to_matched_gray(frame: &LdrFrame, exposure_t: f64) -> Result<ImageBuf> {
    let radiance = ldr_to_radiance(frame)?;
    let matched = radiance_to_ldr(&radiance, exposure_t, frame.gamma())?;
    let (h, w, c) = matched.dims();
    Ok(ImageBuf::from_fn(h, w, 1, |y, x, _| {
        (0..c).map(|ch| matched.pixels().get(y, x, ch)).sum::<f64>() / c as f64
    }))
}

fn harris_corners(gray: &ImageBuf, max_corners: usize) -> Vec<Corner> {
    let (h, w, _) = gray.dims();
    if h < 8 || w < 8 {
        return Vec::new();
    }

    // Central-difference gradients.
    let mut gx = ImageBuf::zeros(h, w, 1);
    let mut gy = ImageBuf::zeros(h, w, 1);
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            gx.set(
                y,
                x,
                0,
                0.5 * (gray.get(y, x + 1, 0) - gray.get(y, x - 1, 0)),
            );
            gy.set(
                y,
                x,
                0,
                0.5 * (gray.get(y + 1, x, 0) - gray.get(y - 1, x, 0)),
            );
        }
    }

    // Structure tensor accumulated over a 5x5 window, Harris response with
    // the usual k = 0.06.
    let win = 2isize;
    let k = 0.06;
    let mut response = ImageBuf::zeros(h, w, 1);
    let mut max_resp = 0.0f64;
    for y in 3..h.saturating_sub(3) {
        for x in 3..w.saturating_sub(3) {
            let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
            for dy in -win..=win {
                for dx in -win..=win {
                    let yy = (y as isize + dy) as usize;
                    let xx = (x as isize + dx) as usize;
                    let ix = gx.get(yy, xx, 0);
                    let iy = gy.get(yy, xx, 0);
                    sxx += ix * ix;
                    sxy += ix * iy;
                    syy += iy * iy;
                }
            }
            let det = sxx * syy - sxy * sxy;
            let tr = sxx + syy;
            let r = det - k * tr * tr;
            response.set(y, x, 0, r);
            max_resp = max_resp.max(r);
        }
    }
    if max_resp <= 0.0 {
        return Vec::new();
    }

    // Non-max suppression plus subpixel refinement by a quadratic fit.
    let threshold = 1e-3 * max_resp;
    let margin = DESCRIPTOR_RADIUS + 1;
    let mut corners = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = response.get(y, x, 0);
            if r <= threshold {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let rn =
                        response.get((y as isize + dy) as usize, (x as isize + dx) as usize, 0);
                    if rn > r || (rn == r && (dy < 0 || (dy == 0 && dx < 0))) {
                        is_max = false;
                        break 'nms;
                    }
                }
            }
            if !is_max {
                continue;
            }
            let (ox, oy) = subpixel_offset(&response, y, x);
            corners.push(Corner {
                x: x as f64 + ox,
                y: y as f64 + oy,
                response: r,
            });
        }
    }

    corners.sort_by(|a, b| {
        b.response
            .partial_cmp(&a.response)
            .unwrap()
            .then(a.y.partial_cmp(&b.y).unwrap())
            .then(a.x.partial_cmp(&b.x).unwrap())
    });
    corners.truncate(max_corners);
    corners
}

/// Quadratic-fit peak offset from the 3x3 response neighborhood, clamped to
/// half a pixel in each direction.
fn subpixel_offset(response: &ImageBuf, y: usize, x: usize) -> (f64, f64) {
    let v = |dy: isize, dx: isize| {
        response.get((y as isize + dy) as usize, (x as isize + dx) as usize, 0)
    };
    let dx = 0.5 * (v(0, 1) - v(0, -1));
    let dy = 0.5 * (v(1, 0) - v(-1, 0));
    let dxx = v(0, 1) - 2.0 * v(0, 0) + v(0, -1);
    let dyy = v(1, 0) - 2.0 * v(0, 0) + v(-1, 0);
    let ox = if dxx < -1e-12 {
        (-dx / dxx).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let oy = if dyy < -1e-12 {
        (-dy / dyy).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    (ox, oy)
}

/// Zero-mean patch descriptor around an integer corner location.
fn descriptor(gray: &ImageBuf, cx: usize, cy: usize) -> Vec<f64> {
    let r = DESCRIPTOR_RADIUS as isize;
    let mut patch = Vec::with_capacity(((2 * r + 1) * (2 * r + 1)) as usize);
    for dy in -r..=r {
        for dx in -r..=r {
            patch.push(gray.get((cy as isize + dy) as usize, (cx as isize + dx) as usize, 0));
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    for v in &mut patch {
        *v -= mean;
    }
    let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for v in &mut patch {
            *v /= norm;
        }
    }
    patch
}

fn match_corners(
    src_gray: &ImageBuf,
    src_corners: &[Corner],
    dst_gray: &ImageBuf,
    dst_corners: &[Corner],
) -> Vec<Match> {
    let src_desc: Vec<Vec<f64>> = src_corners
        .iter()
        .map(|c| descriptor(src_gray, c.x.round() as usize, c.y.round() as usize))
        .collect();
    let dst_desc: Vec<Vec<f64>> = dst_corners
        .iter()
        .map(|c| descriptor(dst_gray, c.x.round() as usize, c.y.round() as usize))
        .collect();

    let mut matches = Vec::new();
    for (i, sd) in src_desc.iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut second = f64::INFINITY;
        let mut best_j = usize::MAX;
        for (j, dd) in dst_desc.iter().enumerate() {
            let dist: f64 = sd
                .iter()
                .zip(dd.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best {
                second = best;
                best = dist;
                best_j = j;
            } else if dist < second {
                second = dist;
            }
        }
        // Lowe-style ratio test; normalized descriptors make the distances
        // comparable across patches.
        if best_j != usize::MAX && (second <= 0.0 || best < 0.8 * second || best < 1e-9) {
            matches.push(Match {
                src: (src_corners[i].x, src_corners[i].y),
                dst: (dst_corners[best_j].x, dst_corners[best_j].y),
            });
        }
    }
    matches
}

/// Exact similarity through two point correspondences via the complex form
/// `q = a z + b`.
fn similarity_from_two(m1: &Match, m2: &Match) -> Option<SimilarityTransform> {
    let zr = m2.src.0 - m1.src.0;
    let zi = m2.src.1 - m1.src.1;
    let qr = m2.dst.0 - m1.dst.0;
    let qi = m2.dst.1 - m1.dst.1;
    let denom = zr * zr + zi * zi;
    if denom < 1e-9 {
        return None;
    }
    let ar = (qr * zr + qi * zi) / denom;
    let ai = (qi * zr - qr * zi) / denom;
    similarity_from_complex(ar, ai, m1)
}

/// Least-squares similarity over all matches (complex Procrustes).
fn fit_similarity(matches: &[&Match]) -> Option<SimilarityTransform> {
    let n = matches.len() as f64;
    let (mut zr_m, mut zi_m, mut qr_m, mut qi_m) = (0.0, 0.0, 0.0, 0.0);
    for m in matches {
        zr_m += m.src.0;
        zi_m += m.src.1;
        qr_m += m.dst.0;
        qi_m += m.dst.1;
    }
    zr_m /= n;
    zi_m /= n;
    qr_m /= n;
    qi_m /= n;

    let (mut num_r, mut num_i, mut denom) = (0.0, 0.0, 0.0);
    for m in matches {
        let zr = m.src.0 - zr_m;
        let zi = m.src.1 - zi_m;
        let qr = m.dst.0 - qr_m;
        let qi = m.dst.1 - qi_m;
        num_r += qr * zr + qi * zi;
        num_i += qi * zr - qr * zi;
        denom += zr * zr + zi * zi;
    }
    if denom < 1e-9 {
        return None;
    }
    let ar = num_r / denom;
    let ai = num_i / denom;

    let centroid = Match {
        src: (zr_m, zi_m),
        dst: (qr_m, qi_m),
    };
    similarity_from_complex(ar, ai, &centroid)
}

fn similarity_from_complex(ar: f64, ai: f64, anchor: &Match) -> Option<SimilarityTransform> {
    let scale = (ar * ar + ai * ai).sqrt();
    if scale < 1e-9 || !scale.is_finite() {
        return None;
    }
    let rotation = ai.atan2(ar);
    // b = q - a z for the anchor correspondence.
    let tx = anchor.dst.0 - (ar * anchor.src.0 - ai * anchor.src.1);
    let ty = anchor.dst.1 - (ai * anchor.src.0 + ar * anchor.src.1);
    Some(SimilarityTransform {
        scale,
        rotation,
        tx,
        ty,
    })
}

/// Smooth seeded random texture, useful as a synthetic alignment target.
pub fn synthetic_texture(height: usize, width: usize, seed: u64) -> ImageBuf {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut img = ImageBuf::from_fn(height, width, 1, |_, _, _| rng.random_range(0.0..1.0));
    // A few box blur passes leave blobs with well-defined corners after a
    // threshold mix.
    for _ in 0..2 {
        let src = img.clone();
        let (h, w, _) = src.dims();
        img = ImageBuf::from_fn(h, w, 1, |y, x, _| {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        sum += src.get(yy as usize, xx as usize, 0);
                        count += 1.0;
                    }
                }
            }
            sum / count
        });
    }
    let lo = img.min();
    let hi = img.max();
    let span = (hi - lo).max(1e-9);
    img.map(|v| 0.05 + 0.9 * (v - lo) / span)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::LdrFrame;
    use proptest::prelude::*;

    fn textured_frame(seed: u64) -> LdrFrame {
        let gray = synthetic_texture(96, 96, seed);
        let rgb = ImageBuf::from_fn(96, 96, 3, |y, x, _| gray.get(y, x, 0));
        LdrFrame::with_default_gamma(rgb, 1.0).unwrap()
    }

    #[test]
    fn transform_inverse_composes_to_identity() {
        let t = SimilarityTransform {
            scale: 1.2,
            rotation: 0.3,
            tx: -4.0,
            ty: 2.5,
        };
        let id = t.compose(&t.inverse());
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!(id.rotation.abs() < 1e-12);
        assert!(id.tx.abs() < 1e-9);
        assert!(id.ty.abs() < 1e-9);
    }

    #[test]
    fn estimate_identity_on_identical_frames() {
        let frame = textured_frame(7);
        let est = estimate_similarity(&frame, &frame, 0).unwrap();
        assert!(!est.degenerate);
        assert!((est.transform.scale - 1.0).abs() < 1e-6);
        assert!(est.transform.rotation.abs() < 1e-6);
        assert!(est.transform.tx.abs() < 1e-6);
        assert!(est.transform.ty.abs() < 1e-6);
    }

    #[test]
    fn estimate_recovers_translation() {
        let frame = textured_frame(11);
        let gt = SimilarityTransform::translation(3.0, 0.0);
        let warped = warp_similarity(frame.pixels(), &gt);
        let dst = LdrFrame::with_default_gamma(warped, 1.0).unwrap();
        let est = estimate_similarity(&frame, &dst, 42).unwrap();
        assert!(!est.degenerate);
        assert!(
            (est.transform.tx - 3.0).abs() < 0.2,
            "tx = {}",
            est.transform.tx
        );
        assert!(est.transform.ty.abs() < 0.2, "ty = {}", est.transform.ty);
    }

    #[test]
    fn estimate_recovers_rotation() {
        let frame = textured_frame(13);
        let angle = 2.0f64.to_radians();
        let gt = SimilarityTransform::rotation_about(angle, 47.5, 47.5);
        let warped = warp_similarity(frame.pixels(), &gt);
        let dst = LdrFrame::with_default_gamma(warped, 1.0).unwrap();
        let est = estimate_similarity(&frame, &dst, 42).unwrap();
        assert!(!est.degenerate);
        let err_deg = (est.transform.rotation - angle).abs().to_degrees();
        assert!(err_deg < 0.1, "rotation error {err_deg} deg");
    }

    #[test]
    fn estimate_recovers_translation_at_the_five_pixel_bound() {
        // Matches the evaluation setting of random per-frame translations in
        // [0, 5] pixels.
        let frame = textured_frame(23);
        let gt = SimilarityTransform::translation(5.0, -3.0);
        let warped = warp_similarity(frame.pixels(), &gt);
        let dst = LdrFrame::with_default_gamma(warped, 1.0).unwrap();
        let est = estimate_similarity(&frame, &dst, 31).unwrap();
        assert!(!est.degenerate);
        assert!(
            (est.transform.tx - 5.0).abs() < 0.2,
            "tx = {}",
            est.transform.tx
        );
        assert!(
            (est.transform.ty + 3.0).abs() < 0.2,
            "ty = {}",
            est.transform.ty
        );
    }

    #[test]
    fn estimate_recovers_translation_across_exposures() {
        // Matches the capture setting: neighbor frames differ by 2 EV.
        let frame = textured_frame(17);
        let gt = SimilarityTransform::translation(-2.0, 4.0);
        let warped = warp_similarity(frame.pixels(), &gt);
        let radiance =
            ldr_to_radiance(&LdrFrame::with_default_gamma(warped, 1.0).unwrap()).unwrap();
        let dst = radiance_to_ldr(&radiance, 4.0, 2.2).unwrap();
        let est = estimate_similarity(&frame, &dst, 9).unwrap();
        assert!(!est.degenerate);
        assert!(
            (est.transform.tx + 2.0).abs() < 0.2,
            "tx = {}",
            est.transform.tx
        );
        assert!(
            (est.transform.ty - 4.0).abs() < 0.2,
            "ty = {}",
            est.transform.ty
        );
    }

    #[test]
    fn degenerate_input_flags_identity() {
        let flat = LdrFrame::with_default_gamma(ImageBuf::splat(64, 64, 3, 0.5), 1.0).unwrap();
        let est = estimate_similarity(&flat, &flat, 0).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.transform, SimilarityTransform::identity());
    }

    #[test]
    fn warp_identity_is_noop() {
        let img = synthetic_texture(16, 16, 3);
        let out = warp_similarity(&img, &SimilarityTransform::identity());
        assert!(img.max_abs_diff(&out) < 1e-12);
    }

    #[test]
    fn warp_integer_translation_shifts_columns() {
        let img = ImageBuf::from_fn(2, 4, 1, |y, x, _| (y * 4 + x) as f64);
        let out = warp_similarity(&img, &SimilarityTransform::translation(1.0, 0.0));
        // Column x reads from x-1; the left edge duplicates column 0.
        for y in 0..2 {
            assert_eq!(out.get(y, 0, 0), img.get(y, 0, 0));
            for x in 1..4 {
                assert_eq!(out.get(y, x, 0), img.get(y, x - 1, 0));
            }
        }
    }

    #[test]
    fn warp_half_pixel_hits_midpoint() {
        let img = ImageBuf::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let out = warp_similarity(&img, &SimilarityTransform::translation(0.5, 0.0));
        assert!((out.get(0, 1, 0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_warp_zero_flow_is_identity() {
        let img = synthetic_texture(12, 9, 5);
        let flow = FlowField::zeros(12, 9);
        let out = backward_warp(&img, &flow).unwrap();
        assert!(img.max_abs_diff(&out) <= 1e-7);
    }

    #[test]
    fn backward_warp_integer_flow_matches_gather() {
        let img = ImageBuf::from_fn(4, 6, 2, |y, x, c| (y * 100 + x * 10 + c) as f64);
        let flow = FlowField::new(ImageBuf::from_fn(
            4,
            6,
            2,
            |_, _, c| {
                if c == 0 {
                    2.0
                } else {
                    0.0
                }
            },
        ))
        .unwrap();
        let out = backward_warp(&img, &flow).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                let sx = (x + 2).min(5);
                for c in 0..2 {
                    assert_eq!(out.get(y, x, c), img.get(y, sx, c));
                }
            }
        }
    }

    #[test]
    fn backward_warp_rejects_size_mismatch() {
        let img = ImageBuf::zeros(4, 4, 1);
        let flow = FlowField::zeros(4, 5);
        assert!(backward_warp(&img, &flow).is_err());
    }

    proptest! {
        #[test]
        fn warp_is_linear_in_the_image(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let x = synthetic_texture(8, 8, seed);
            let y = synthetic_texture(8, 8, seed.wrapping_add(1));
            let flow = FlowField::new(ImageBuf::from_fn(8, 8, 2, |yy, xx, c| {
                ((yy * 8 + xx + c) % 5) as f64 * 0.3 - 0.6
            })).unwrap();

            let combo = x.zip_map(&y, |xv, yv| a * xv + b * yv).unwrap();
            let warped_combo = backward_warp(&combo, &flow).unwrap();
            let wx = backward_warp(&x, &flow).unwrap();
            let wy = backward_warp(&y, &flow).unwrap();
            let recombined = wx.zip_map(&wy, |xv, yv| a * xv + b * yv).unwrap();
            prop_assert!(warped_combo.max_abs_diff(&recombined) < 1e-6);
        }

        #[test]
        fn inverse_roundtrip_identity(scale in 0.5f64..2.0, rot in -1.0f64..1.0,
                                      tx in -10.0f64..10.0, ty in -10.0f64..10.0) {
            let t = SimilarityTransform { scale, rotation: rot, tx, ty };
            let id = t.compose(&t.inverse());
            prop_assert!((id.scale - 1.0).abs() < 1e-6);
            prop_assert!(id.rotation.abs() < 1e-6);
            prop_assert!(id.tx.abs() < 1e-6);
            prop_assert!(id.ty.abs() < 1e-6);
        }
    }
}
