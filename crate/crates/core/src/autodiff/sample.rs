//! Differentiable bilinear sampling: flow-driven backward warping and
//! deformable convolution.
//!
//! Warping clamps out-of-bounds reads to the border so nothing reads as
//! underexposed black downstream. Deformable sampling instead fades to zero
//! outside the image, matching the standard deformable-convolution operator
//! so that zero offsets reproduce an ordinary zero-padded convolution
//! exactly.

use super::conv::matmul;
use super::{NodeId, Tape};
use crate::tensor::Tensor;

/// Backward warp `img` by `flow`: `out[c](p) = img[c](p + flow(p))`.
///
/// `img: [C, H, W]`, `flow: [2, H, W]` with channel 0 = dx, channel 1 = dy.
/// Differentiable in both arguments; border reads clamp to the edge, where
/// the positional gradient is zero.
pub fn grid_sample_flow(tape: &mut Tape, img: NodeId, flow: NodeId) -> NodeId {
    let (c, h, w) = {
        let v = tape.value(img);
        assert_eq!(v.shape().len(), 3);
        (v.shape()[0], v.shape()[1], v.shape()[2])
    };
    {
        let f = tape.value(flow);
        assert_eq!(f.shape(), &[2, h, w], "flow shape mismatch");
    }

    let forward = |imgv: &Tensor, flowv: &Tensor| -> Tensor {
        let mut out = Tensor::zeros(&[c, h, w]);
        for y in 0..h {
            for x in 0..w {
                let sx = x as f64 + flowv.at3(0, y, x);
                let sy = y as f64 + flowv.at3(1, y, x);
                let s = ClampSample::at(sy, sx, h, w);
                for ch in 0..c {
                    out.set3(ch, y, x, s.value(imgv, ch));
                }
            }
        }
        out
    };

    let value = forward(tape.value(img), tape.value(flow));
    tape.push_node(
        value,
        vec![img, flow],
        Box::new(move |g, _, parents| {
            let (imgv, flowv) = (parents[0], parents[1]);
            let mut gimg = Tensor::zeros(&[c, h, w]);
            let mut gflow = Tensor::zeros(&[2, h, w]);
            for y in 0..h {
                for x in 0..w {
                    let sx = x as f64 + flowv.at3(0, y, x);
                    let sy = y as f64 + flowv.at3(1, y, x);
                    let s = ClampSample::at(sy, sx, h, w);
                    let (mut gx, mut gy) = (0.0, 0.0);
                    for ch in 0..c {
                        let gv = g.at3(ch, y, x);
                        s.scatter(&mut gimg, ch, gv);
                        let (dx, dy) = s.position_grad(imgv, ch);
                        gx += gv * dx;
                        gy += gv * dy;
                    }
                    gflow.set3(0, y, x, gx);
                    gflow.set3(1, y, x, gy);
                }
            }
            vec![gimg, gflow]
        }),
    )
}

/// Deformable convolution, stride 1, pad `k/2`.
///
/// `x: [Ci, H, W]`, `offsets: [2*k*k, H, W]` (channel `2t` = dx and `2t+1` =
/// dy for tap `t = ky*k + kx`), `w: [Co, Ci, k, k]`, `b: [Co]`.
pub fn deform_conv2d(tape: &mut Tape, x: NodeId, offsets: NodeId, w: NodeId, b: NodeId) -> NodeId {
    let (ci, h, width) = {
        let v = tape.value(x);
        assert_eq!(v.shape().len(), 3);
        (v.shape()[0], v.shape()[1], v.shape()[2])
    };
    let (co, k) = {
        let v = tape.value(w);
        assert_eq!(v.shape().len(), 4);
        assert_eq!(v.shape()[1], ci, "deform_conv2d channel mismatch");
        assert_eq!(v.shape()[2], v.shape()[3]);
        (v.shape()[0], v.shape()[2])
    };
    let taps = k * k;
    {
        let o = tape.value(offsets);
        assert_eq!(
            o.shape(),
            &[2 * taps, h, width],
            "offset field shape mismatch"
        );
    }
    assert_eq!(tape.value(b).shape(), &[co]);

    let pad = k / 2;
    let p = h * width;
    let ctk = ci * taps;

    let build_columns = move |xv: &Tensor, ov: &Tensor| -> Vec<f64> {
        let mut cols = vec![0.0; ctk * p];
        for y in 0..h {
            for xx in 0..width {
                let pi = y * width + xx;
                for t in 0..taps {
                    let (ky, kx) = (t / k, t % k);
                    let sx = (xx + kx) as f64 - pad as f64 + ov.at3(2 * t, y, xx);
                    let sy = (y + ky) as f64 - pad as f64 + ov.at3(2 * t + 1, y, xx);
                    let s = ZeroSample::at(sy, sx, h, width);
                    for c in 0..ci {
                        cols[(c * taps + t) * p + pi] = s.value(xv, c);
                    }
                }
            }
        }
        cols
    };

    let cols = build_columns(tape.value(x), tape.value(offsets));
    let mut out = vec![0.0; co * p];
    matmul(co, ctk, p, tape.value(w).data(), &cols, &mut out);
    {
        let bias = tape.value(b).data();
        for (row, &bv) in bias.iter().enumerate() {
            for v in &mut out[row * p..(row + 1) * p] {
                *v += bv;
            }
        }
    }
    let value = Tensor::new(vec![co, h, width], out);

    tape.push_node(
        value,
        vec![x, offsets, w, b],
        Box::new(move |g, _, parents| {
            let (xv, ov, wv) = (parents[0], parents[1], parents[2]);
            let g2 = g.data(); // [Co, P]

            let mut gb = vec![0.0; co];
            for row in 0..co {
                gb[row] = g2[row * p..(row + 1) * p].iter().sum();
            }

            let cols = build_columns(xv, ov);

            // dW = g2 (Co x P) * cols^T
            let mut gw = vec![0.0; co * ctk];
            unsafe {
                matrixmultiply::dgemm(
                    co,
                    p,
                    ctk,
                    1.0,
                    g2.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    0.0,
                    gw.as_mut_ptr(),
                    ctk as isize,
                    1,
                );
            }

            // dcols = w^T (CTK x Co) * g2
            let mut gcols = vec![0.0; ctk * p];
            unsafe {
                matrixmultiply::dgemm(
                    ctk,
                    co,
                    p,
                    1.0,
                    wv.data().as_ptr(),
                    1,
                    ctk as isize,
                    g2.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    gcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }

            let mut gx = Tensor::zeros(&[ci, h, width]);
            let mut go = Tensor::zeros(&[2 * taps, h, width]);
            for y in 0..h {
                for xx in 0..width {
                    let pi = y * width + xx;
                    for t in 0..taps {
                        let (ky, kx) = (t / k, t % k);
                        let sx = (xx + kx) as f64 - pad as f64 + ov.at3(2 * t, y, xx);
                        let sy = (y + ky) as f64 - pad as f64 + ov.at3(2 * t + 1, y, xx);
                        let s = ZeroSample::at(sy, sx, h, width);
                        let (mut gox, mut goy) = (0.0, 0.0);
                        for c in 0..ci {
                            let gc = gcols[(c * taps + t) * p + pi];
                            if gc == 0.0 {
                                continue;
                            }
                            s.scatter(&mut gx, c, gc);
                            let (dx, dy) = s.position_grad(xv, c);
                            gox += gc * dx;
                            goy += gc * dy;
                        }
                        go.set3(2 * t, y, xx, gox);
                        go.set3(2 * t + 1, y, xx, goy);
                    }
                }
            }

            vec![
                gx,
                go,
                Tensor::new(vec![co, ci, k, k], gw),
                Tensor::new(vec![co], gb),
            ]
        }),
    )
}

/// Bilinear sample with clamp-to-edge reads. Positional gradients vanish in
/// the clamped region.
struct ClampSample {
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
    fx: f64,
    fy: f64,
    gate_x: f64,
    gate_y: f64,
}

impl ClampSample {
    fn at(sy: f64, sx: f64, h: usize, w: usize) -> Self {
        let max_x = (w - 1) as f64;
        let max_y = (h - 1) as f64;
        let cx = sx.clamp(0.0, max_x);
        let cy = sy.clamp(0.0, max_y);
        let x0 = cx.floor() as usize;
        let y0 = cy.floor() as usize;
        Self {
            y0,
            y1: (y0 + 1).min(h - 1),
            x0,
            x1: (x0 + 1).min(w - 1),
            fx: cx - x0 as f64,
            fy: cy - y0 as f64,
            gate_x: if sx > 0.0 && sx < max_x { 1.0 } else { 0.0 },
            gate_y: if sy > 0.0 && sy < max_y { 1.0 } else { 0.0 },
        }
    }

    #[inline]
    fn value(&self, t: &Tensor, c: usize) -> f64 {
        let v00 = t.at3(c, self.y0, self.x0);
        let v01 = t.at3(c, self.y0, self.x1);
        let v10 = t.at3(c, self.y1, self.x0);
        let v11 = t.at3(c, self.y1, self.x1);
        (v00 * (1.0 - self.fx) + v01 * self.fx) * (1.0 - self.fy)
            + (v10 * (1.0 - self.fx) + v11 * self.fx) * self.fy
    }

    #[inline]
    fn position_grad(&self, t: &Tensor, c: usize) -> (f64, f64) {
        let v00 = t.at3(c, self.y0, self.x0);
        let v01 = t.at3(c, self.y0, self.x1);
        let v10 = t.at3(c, self.y1, self.x0);
        let v11 = t.at3(c, self.y1, self.x1);
        (
            self.gate_x * ((v01 - v00) * (1.0 - self.fy) + (v11 - v10) * self.fy),
            self.gate_y * ((v10 - v00) * (1.0 - self.fx) + (v11 - v01) * self.fx),
        )
    }

    #[inline]
    fn scatter(&self, grad: &mut Tensor, c: usize, g: f64) {
        let (h, w) = (grad.shape()[1], grad.shape()[2]);
        let data = grad.data_mut();
        let idx = |y: usize, x: usize| (c * h + y) * w + x;
        data[idx(self.y0, self.x0)] += g * (1.0 - self.fx) * (1.0 - self.fy);
        data[idx(self.y0, self.x1)] += g * self.fx * (1.0 - self.fy);
        data[idx(self.y1, self.x0)] += g * (1.0 - self.fx) * self.fy;
        data[idx(self.y1, self.x1)] += g * self.fx * self.fy;
    }
}

/// Bilinear sample that fades to zero outside the image, the standard
/// deformable-convolution boundary rule.
struct ZeroSample {
    // Corner coordinates; negative means "outside, contributes zero".
    corners: [(isize, isize, f64); 4],
    fx: f64,
    fy: f64,
    inside: bool,
}

impl ZeroSample {
    fn at(sy: f64, sx: f64, h: usize, w: usize) -> Self {
        let inside = sy > -1.0 && sy < h as f64 && sx > -1.0 && sx < w as f64;
        if !inside {
            return Self {
                corners: [(-1, -1, 0.0); 4],
                fx: 0.0,
                fy: 0.0,
                inside,
            };
        }
        let y0 = sy.floor();
        let x0 = sx.floor();
        let fy = sy - y0;
        let fx = sx - x0;
        let mut corners = [(-1isize, -1isize, 0.0f64); 4];
        let weights = [
            (y0 as isize, x0 as isize, (1.0 - fx) * (1.0 - fy)),
            (y0 as isize, x0 as isize + 1, fx * (1.0 - fy)),
            (y0 as isize + 1, x0 as isize, (1.0 - fx) * fy),
            (y0 as isize + 1, x0 as isize + 1, fx * fy),
        ];
        for (i, (cy, cx, wt)) in weights.into_iter().enumerate() {
            if cy >= 0 && cy < h as isize && cx >= 0 && cx < w as isize {
                corners[i] = (cy, cx, wt);
            }
        }
        Self {
            corners,
            fx,
            fy,
            inside,
        }
    }

    #[inline]
    fn corner_value(&self, t: &Tensor, c: usize, i: usize) -> f64 {
        let (cy, cx, _) = self.corners[i];
        if cy < 0 {
            0.0
        } else {
            t.at3(c, cy as usize, cx as usize)
        }
    }

    #[inline]
    fn value(&self, t: &Tensor, c: usize) -> f64 {
        if !self.inside {
            return 0.0;
        }
        (0..4)
            .map(|i| self.corners[i].2 * self.corner_value(t, c, i))
            .sum()
    }

    #[inline]
    fn position_grad(&self, t: &Tensor, c: usize) -> (f64, f64) {
        if !self.inside {
            return (0.0, 0.0);
        }
        let v00 = self.corner_value(t, c, 0);
        let v01 = self.corner_value(t, c, 1);
        let v10 = self.corner_value(t, c, 2);
        let v11 = self.corner_value(t, c, 3);
        (
            (v01 - v00) * (1.0 - self.fy) + (v11 - v10) * self.fy,
            (v10 - v00) * (1.0 - self.fx) + (v11 - v01) * self.fx,
        )
    }

    #[inline]
    fn scatter(&self, grad: &mut Tensor, c: usize, g: f64) {
        if !self.inside {
            return;
        }
        let (h, w) = (grad.shape()[1], grad.shape()[2]);
        let data = grad.data_mut();
        for &(cy, cx, wt) in &self.corners {
            if cy >= 0 {
                data[(c * h + cy as usize) * w + cx as usize] += g * wt;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::conv::conv2d;
    use super::super::gradcheck::{check_gradients, GradCheck};
    use super::*;

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(3);
        Tensor::from_fn(shape, |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = seeded(&[3, 5, 6], 1);
        let mut tape = Tape::new();
        let i = tape.leaf(img.clone());
        let f = tape.leaf(Tensor::zeros(&[2, 5, 6]));
        let out = grid_sample_flow(&mut tape, i, f);
        assert!(tape.value(out).max_abs_diff(&img) <= 1e-7);
    }

    #[test]
    fn integer_flow_matches_gather_with_clamping() {
        let img = seeded(&[2, 4, 5], 2);
        let mut flow = Tensor::zeros(&[2, 4, 5]);
        for y in 0..4 {
            for x in 0..5 {
                flow.set3(0, y, x, 2.0);
                flow.set3(1, y, x, -1.0);
            }
        }
        let mut tape = Tape::new();
        let i = tape.leaf(img.clone());
        let f = tape.leaf(flow);
        let out = grid_sample_flow(&mut tape, i, f);
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..5 {
                    let sy = (y as isize - 1).max(0) as usize;
                    let sx = (x + 2).min(4);
                    assert_eq!(tape.value(out).at3(c, y, x), img.at3(c, sy, sx));
                }
            }
        }
    }

    #[test]
    fn grid_sample_gradients_match_finite_differences() {
        let img = seeded(&[2, 5, 5], 3);
        // Non-integer interior flow keeps the check away from interpolation
        // kinks and the border gate.
        let flow = Tensor::from_fn(&[2, 5, 5], |i| 0.3 + 0.17 * ((i % 7) as f64 - 3.0) / 3.0);
        let report = check_gradients(&GradCheck::default(), &[img, flow], |tape, ids| {
            let out = grid_sample_flow(tape, ids[0], ids[1]);
            let sq = tape.mul(out, out);
            tape.sum_all(sq)
        });
        assert!(
            report.max_rel_error < 1e-3,
            "rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn zero_offsets_reduce_to_standard_convolution() {
        let x = seeded(&[2, 6, 6], 4);
        let w = seeded(&[3, 2, 3, 3], 5);
        let b = seeded(&[3], 6);

        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let oi = tape.leaf(Tensor::zeros(&[18, 6, 6]));
        let wi = tape.leaf(w.clone());
        let bi = tape.leaf(b.clone());
        let deform = deform_conv2d(&mut tape, xi, oi, wi, bi);

        let xi2 = tape.leaf(x);
        let wi2 = tape.leaf(w);
        let bi2 = tape.leaf(b);
        let standard = conv2d(&mut tape, xi2, wi2, bi2, 1, 1);

        assert!(tape.value(deform).max_abs_diff(tape.value(standard)) < 1e-5);
    }

    #[test]
    fn constant_integer_offset_matches_shifted_convolution() {
        let x = seeded(&[1, 6, 7], 7);
        let w = seeded(&[2, 1, 3, 3], 8);
        let b = Tensor::zeros(&[2]);

        // Offset (dx, dy) = (1, 0) on every tap samples the input shifted one
        // column left (x + 1), which equals convolving the shifted image.
        let mut offsets = Tensor::zeros(&[18, 6, 7]);
        for t in 0..9 {
            for y in 0..6 {
                for xx in 0..7 {
                    offsets.set3(2 * t, y, xx, 1.0);
                }
            }
        }

        let mut shifted = Tensor::zeros(&[1, 6, 7]);
        for y in 0..6 {
            for xx in 0..7 {
                let v = if xx + 1 < 7 { x.at3(0, y, xx + 1) } else { 0.0 };
                shifted.set3(0, y, xx, v);
            }
        }

        let mut tape = Tape::new();
        let xi = tape.leaf(x);
        let oi = tape.leaf(offsets);
        let wi = tape.leaf(w.clone());
        let bi = tape.leaf(b.clone());
        let deform = deform_conv2d(&mut tape, xi, oi, wi, bi);

        let si = tape.leaf(shifted);
        let wi2 = tape.leaf(w);
        let bi2 = tape.leaf(b);
        let reference = conv2d(&mut tape, si, wi2, bi2, 1, 1);

        // Interior columns agree exactly. The leftmost column differs by
        // construction: the offset window still sees a valid pixel there
        // while the shifted reference reads zero padding.
        let d = tape.value(deform);
        let r = tape.value(reference);
        for c in 0..2 {
            for y in 0..6 {
                for xx in 1..6 {
                    assert!(
                        (d.at3(c, y, xx) - r.at3(c, y, xx)).abs() < 1e-12,
                        "mismatch at {c},{y},{xx}"
                    );
                }
            }
        }
    }

    #[test]
    fn deform_conv_gradients_match_finite_differences() {
        // 6x6 single-channel instance with non-integer offsets.
        let x = seeded(&[1, 6, 6], 9);
        let offsets = Tensor::from_fn(&[18, 6, 6], |i| 0.25 + 0.1 * ((i % 5) as f64 - 2.0) / 2.0);
        let w = seeded(&[1, 1, 3, 3], 10);
        let b = seeded(&[1], 11);
        let report = check_gradients(&GradCheck::default(), &[x, offsets, w, b], |tape, ids| {
            let out = deform_conv2d(tape, ids[0], ids[1], ids[2], ids[3]);
            let sq = tape.mul(out, out);
            tape.sum_all(sq)
        });
        assert!(
            report.max_rel_error < 1e-3,
            "rel error {}",
            report.max_rel_error
        );
    }
}
