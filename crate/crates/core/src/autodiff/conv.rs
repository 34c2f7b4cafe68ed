//! 2D convolution via im2col plus a dgemm kernel.
//!
//! Zero padding, square kernels, configurable stride. The column matrix is
//! rebuilt in the backward pass instead of being cached on the tape; at desk
//! scale the copies are cheap next to the matrix products.

use super::{NodeId, Tape};
use crate::tensor::Tensor;

/// `x: [Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]` -> `[Co, Ho, Wo]`.
pub fn conv2d(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    stride: usize,
    pad: usize,
) -> NodeId {
    let (ci, h, width) = {
        let v = tape.value(x);
        assert_eq!(v.shape().len(), 3, "conv2d input must be [C, H, W]");
        (v.shape()[0], v.shape()[1], v.shape()[2])
    };
    let (co, k) = {
        let v = tape.value(w);
        assert_eq!(v.shape().len(), 4, "conv2d weight must be [Co, Ci, k, k]");
        assert_eq!(v.shape()[1], ci, "conv2d channel mismatch");
        assert_eq!(v.shape()[2], v.shape()[3], "conv2d kernel must be square");
        (v.shape()[0], v.shape()[2])
    };
    assert_eq!(tape.value(b).shape(), &[co], "conv2d bias mismatch");
    assert!(stride >= 1);
    assert!(
        h + 2 * pad >= k && width + 2 * pad >= k,
        "conv2d input {h}x{width} too small for kernel {k} with pad {pad}"
    );

    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (width + 2 * pad - k) / stride + 1;
    let p = oh * ow;
    let ckk = ci * k * k;

    let cols = im2col(tape.value(x), k, stride, pad, oh, ow);
    let mut out = vec![0.0; co * p];
    matmul(co, ckk, p, tape.value(w).data(), &cols, &mut out);
    {
        let bias = tape.value(b).data();
        for (row, &bv) in bias.iter().enumerate() {
            for v in &mut out[row * p..(row + 1) * p] {
                *v += bv;
            }
        }
    }
    let value = Tensor::new(vec![co, oh, ow], out);

    tape.push_node(
        value,
        vec![x, w, b],
        Box::new(move |g, _, parents| {
            let (xv, wv) = (parents[0], parents[1]);
            let g2 = g.data(); // [Co, P] row-major

            let mut gb = vec![0.0; co];
            for row in 0..co {
                gb[row] = g2[row * p..(row + 1) * p].iter().sum();
            }

            let cols = im2col(xv, k, stride, pad, oh, ow);
            // dW = g2 (Co x P) * cols^T (P x CKK)
            let mut gw = vec![0.0; co * ckk];
            matmul_bt(co, p, ckk, g2, &cols, &mut gw);

            // dcols = w^T (CKK x Co) * g2 (Co x P)
            let mut gcols = vec![0.0; ckk * p];
            matmul_at(ckk, co, p, wv.data(), g2, &mut gcols);

            let gx = col2im(&gcols, ci, h, width, k, stride, pad, oh, ow);

            vec![
                Tensor::new(vec![ci, h, width], gx),
                Tensor::new(vec![co, ci, k, k], gw),
                Tensor::new(vec![co], gb),
            ]
        }),
    )
}

fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let p = oh * ow;
    let mut cols = vec![0.0; ci * k * k * p];
    let data = x.data();
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = (c * h + sy as usize) * w;
                    let dst_row = row + oy * ow;
                    for ox in 0..ow {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            cols[dst_row + ox] = data[src_row + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    gcols: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let p = oh * ow;
    let mut gx = vec![0.0; ci * h * w];
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * p;
                for oy in 0..oh {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = (c * h + sy as usize) * w;
                    let src_row = row + oy * ow;
                    for ox in 0..ow {
                        let sx = (ox * stride + kx) as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            gx[dst_row + sx as usize] += gcols[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// c = a * b with row-major a: [m, k], b: [k, n], c: [m, n].
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = a * b^T with a: [m, k], b: [n, k] (so b^T is [k, n]).
fn matmul_bt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c = a^T * b with a: [k, m] (so a^T is [m, k]), b: [k, n].
fn matmul_at(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::{check_gradients, GradCheck};
    use super::*;

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(11);
        Tensor::from_fn(shape, |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        })
    }

    /// Direct nested-loop convolution used as the brute-force oracle.
    fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci, h, iw) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (iw + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[co, oh, ow]);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = (oy * stride + ky) as isize - pad as isize;
                                let sx = (ox * stride + kx) as isize - pad as isize;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < iw as isize {
                                    acc += x.at3(c, sy as usize, sx as usize)
                                        * w.data()[((o * ci + c) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                    out.set3(o, oy, ox, acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let x = seeded(&[3, 6, 7], 1);
            let w = seeded(&[4, 3, 3, 3], 2);
            let b = seeded(&[4], 3);
            let mut tape = Tape::new();
            let (xi, wi, bi) = (
                tape.leaf(x.clone()),
                tape.leaf(w.clone()),
                tape.leaf(b.clone()),
            );
            let y = conv2d(&mut tape, xi, wi, bi, stride, pad);
            let expected = conv_naive(&x, &w, &b, stride, pad);
            assert_eq!(tape.value(y).shape(), expected.shape());
            assert!(
                tape.value(y).max_abs_diff(&expected) < 1e-12,
                "stride {stride} pad {pad}"
            );
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let x = seeded(&[2, 5, 5], 4);
        let w = seeded(&[3, 2, 3, 3], 5);
        let b = seeded(&[3], 6);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let report = check_gradients(
                &GradCheck::default(),
                &[x.clone(), w.clone(), b.clone()],
                |tape, ids| {
                    let y = conv2d(tape, ids[0], ids[1], ids[2], stride, pad);
                    let sq = tape.mul(y, y);
                    tape.sum_all(sq)
                },
            );
            assert!(
                report.max_rel_error < 1e-3,
                "stride {stride} pad {pad}: rel error {}",
                report.max_rel_error
            );
        }
    }
}
