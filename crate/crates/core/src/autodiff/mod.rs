//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes in topological
//! order; [`Tape::backward`] walks it in reverse and accumulates gradients in
//! a fixed order, so repeated runs with identical inputs produce bit-identical
//! results. Everything is f64 and single-threaded.

mod conv;
mod sample;

pub mod gradcheck;

pub use conv::conv2d;
pub use sample::{deform_conv2d, grid_sample_flow};

use crate::tensor::Tensor;

pub type NodeId = usize;

type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<NodeId>,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input (or parameter) node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Vec::new(), None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: Option<BackwardFn>,
    ) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value pushed onto tape");
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        self.nodes.len() - 1
    }

    /// Backpropagate from a scalar root. Nodes recorded after `root` are
    /// ignored; nodes that do not influence it get no gradient.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[root].value.numel(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root] = Some(Tensor::scalar(1.0));

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                // Leaves keep their accumulated gradient.
                continue;
            };
            let Some(out_grad) = grads[id].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(&out_grad, &node.value, &parent_values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (pid, pg) in node.parents.iter().zip(parent_grads) {
                debug_assert_eq!(pg.shape(), self.nodes[*pid].value.shape());
                match &mut grads[*pid] {
                    Some(existing) => existing.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }

        Gradients { grads }
    }

    // --- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| {
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                vec![g.clone(), neg]
            })),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, p| {
                vec![
                    zip(g, p[1], |gv, bv| gv * bv),
                    zip(g, p[0], |gv, av| gv * av),
                ]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = map(self.value(a), |x| x * k);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, _| vec![map(g, |gv| gv * k)])),
        )
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = map(self.value(a), |x| if x > 0.0 { x } else { alpha * x });
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, p| {
                vec![zip(g, p[0], |gv, x| if x > 0.0 { gv } else { alpha * gv })]
            })),
        )
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), softplus_value);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, p| {
                vec![zip(g, p[0], |gv, x| gv * sigmoid_value(x))]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), sigmoid_value);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, out, _| {
                vec![zip(g, out, |gv, s| gv * s * (1.0 - s))]
            })),
        )
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f64::abs);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, p| {
                vec![zip(g, p[0], |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })]
            })),
        )
    }

    /// `max(x, 0)^gamma` with `gamma > 1`; the forward clamp keeps warped LDR
    /// inputs valid even if interpolation undershoots by rounding.
    pub fn pow_gamma(&mut self, a: NodeId, gamma: f64) -> NodeId {
        let v = map(self.value(a), |x| x.max(0.0).powf(gamma));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, p| {
                vec![zip(g, p[0], |gv, x| {
                    if x > 0.0 {
                        gv * gamma * x.powf(gamma - 1.0)
                    } else {
                        0.0
                    }
                })]
            })),
        )
    }

    /// Mu-law range compression `ln(1 + mu max(x,0)) / ln(1 + mu)`.
    pub fn mu_law(&mut self, a: NodeId, mu: f64) -> NodeId {
        let log_denom = (1.0 + mu).ln();
        let v = map(self.value(a), |x| (1.0 + mu * x.max(0.0)).ln() / log_denom);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, p| {
                vec![zip(g, p[0], |gv, x| {
                    gv * mu / ((1.0 + mu * x.max(0.0)) * log_denom)
                })]
            })),
        )
    }

    /// Inverse mu-law: `((1 + mu)^t - 1) / mu`.
    pub fn mu_expand(&mut self, a: NodeId, mu: f64) -> NodeId {
        let log1p_mu = (1.0 + mu).ln();
        let v = map(self.value(a), |t| (t * log1p_mu).exp_m1() / mu);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, p| {
                vec![zip(g, p[0], |gv, t| {
                    gv * log1p_mu * (t * log1p_mu).exp() / mu
                })]
            })),
        )
    }

    /// Symmetric hard clamp to [-limit, limit]; gradient passes through the
    /// interior and is cut outside.
    pub fn clamp_sym(&mut self, a: NodeId, limit: f64) -> NodeId {
        let v = map(self.value(a), |x| x.clamp(-limit, limit));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, p| {
                vec![zip(g, p[0], |gv, x| if x.abs() < limit { gv } else { 0.0 })]
            })),
        )
    }

    // --- broadcasting over the channel axis ---------------------------------

    /// `[1, H, W] * [C, H, W]`, the single-channel factor broadcast over C.
    pub fn mul_broadcast(&mut self, single: NodeId, multi: NodeId) -> NodeId {
        let s = self.value(single);
        let m = self.value(multi);
        assert_eq!(s.shape()[0], 1, "broadcast factor must be single-channel");
        assert_eq!(s.shape()[1..], m.shape()[1..], "broadcast spatial mismatch");
        let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let hw = h * w;
        let mut out = Tensor::zeros(m.shape());
        for ch in 0..c {
            for i in 0..hw {
                out.data_mut()[ch * hw + i] = s.data()[i] * m.data()[ch * hw + i];
            }
        }
        self.push(
            out,
            vec![single, multi],
            Some(Box::new(move |g, _, p| {
                let (s, m) = (p[0], p[1]);
                let mut gs = Tensor::zeros(s.shape());
                let mut gm = Tensor::zeros(m.shape());
                for ch in 0..c {
                    for i in 0..hw {
                        gs.data_mut()[i] += g.data()[ch * hw + i] * m.data()[ch * hw + i];
                        gm.data_mut()[ch * hw + i] = g.data()[ch * hw + i] * s.data()[i];
                    }
                }
                vec![gs, gm]
            })),
        )
    }

    /// `num / (den + eps)` with `num: [C, H, W]`, `den: [1, H, W]`.
    pub fn div_stabilized(&mut self, num: NodeId, den: NodeId, eps: f64) -> NodeId {
        let n = self.value(num);
        let d = self.value(den);
        assert_eq!(d.shape()[0], 1, "denominator must be single-channel");
        assert_eq!(n.shape()[1..], d.shape()[1..], "division spatial mismatch");
        let (c, h, w) = (n.shape()[0], n.shape()[1], n.shape()[2]);
        let hw = h * w;
        let mut out = Tensor::zeros(n.shape());
        for ch in 0..c {
            for i in 0..hw {
                out.data_mut()[ch * hw + i] = n.data()[ch * hw + i] / (d.data()[i] + eps);
            }
        }
        self.push(
            out,
            vec![num, den],
            Some(Box::new(move |g, _, p| {
                let (n, d) = (p[0], p[1]);
                let mut gn = Tensor::zeros(n.shape());
                let mut gd = Tensor::zeros(d.shape());
                for ch in 0..c {
                    for i in 0..hw {
                        let denom = d.data()[i] + eps;
                        let gv = g.data()[ch * hw + i];
                        gn.data_mut()[ch * hw + i] = gv / denom;
                        gd.data_mut()[i] -= gv * n.data()[ch * hw + i] / (denom * denom);
                    }
                }
                vec![gn, gd]
            })),
        )
    }

    // --- shape ---------------------------------------------------------------

    /// Concatenate [C_i, H, W] tensors along the channel axis.
    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (h, w) = {
            let first = self.value(parts[0]);
            (first.shape()[1], first.shape()[2])
        };
        let mut channels = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &[h, w], "concat spatial mismatch");
            channels.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let total: usize = channels.iter().sum();
        let out = Tensor::new(vec![total, h, w], data);
        let sizes: Vec<usize> = channels.iter().map(|c| c * h * w).collect();
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _, p| {
                let mut grads = Vec::with_capacity(p.len());
                let mut offset = 0;
                for (i, parent) in p.iter().enumerate() {
                    let chunk = g.data()[offset..offset + sizes[i]].to_vec();
                    grads.push(Tensor::new(parent.shape().to_vec(), chunk));
                    offset += sizes[i];
                }
                grads
            })),
        )
    }

    /// Take channels `[start, start + len)` of a [C, H, W] tensor.
    pub fn slice_c(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        assert!(start + len <= c, "slice_c out of range");
        let hw = h * w;
        let data = v.data()[start * hw..(start + len) * hw].to_vec();
        let out = Tensor::new(vec![len, h, w], data);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, p| {
                let mut gp = Tensor::zeros(p[0].shape());
                gp.data_mut()[start * hw..(start + len) * hw].copy_from_slice(g.data());
                vec![gp]
            })),
        )
    }

    /// Bilinear 2x upsampling of a [C, h, w] tensor (half-pixel centers,
    /// clamp-to-edge). A linear map, so the backward pass is its transpose.
    pub fn upsample2(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let (oh, ow) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for y in 0..oh {
                let (y0, y1, fy) = up_coords(y, h);
                for x in 0..ow {
                    let (x0, x1, fx) = up_coords(x, w);
                    let v00 = v.at3(ch, y0, x0);
                    let v01 = v.at3(ch, y0, x1);
                    let v10 = v.at3(ch, y1, x0);
                    let v11 = v.at3(ch, y1, x1);
                    out.set3(
                        ch,
                        y,
                        x,
                        (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy)
                            + (v10 * (1.0 - fx) + v11 * fx) * fy,
                    );
                }
            }
        }
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g, _, _| {
                let mut gp = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..oh {
                        let (y0, y1, fy) = up_coords(y, h);
                        for x in 0..ow {
                            let (x0, x1, fx) = up_coords(x, w);
                            let gv = g.at3(ch, y, x);
                            *gp_at(&mut gp, ch, y0, x0, h, w) += gv * (1.0 - fx) * (1.0 - fy);
                            *gp_at(&mut gp, ch, y0, x1, h, w) += gv * fx * (1.0 - fy);
                            *gp_at(&mut gp, ch, y1, x0, h, w) += gv * (1.0 - fx) * fy;
                            *gp_at(&mut gp, ch, y1, x1, h, w) += gv * fx * fy;
                        }
                    }
                }
                vec![gp]
            })),
        )
    }

    // --- reductions ----------------------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, p| {
                vec![Tensor::full(p[0].shape(), g.item())]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).numel() as f64;
        let v = Tensor::scalar(self.value(a).data().iter().sum::<f64>() / n);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, p| {
                vec![Tensor::full(p[0].shape(), g.item() / n)]
            })),
        )
    }

    pub(crate) fn push_node(
        &mut self,
        value: Tensor,
        parents: Vec<NodeId>,
        backward: BackwardFn,
    ) -> NodeId {
        self.push(value, parents, Some(backward))
    }
}

/// Source coordinates for 2x bilinear upsampling with half-pixel centers.
#[inline]
fn up_coords(out_idx: usize, in_len: usize) -> (usize, usize, f64) {
    let pos = (out_idx as f64 + 0.5) / 2.0 - 0.5;
    let clamped = pos.clamp(0.0, (in_len - 1) as f64);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, clamped - i0 as f64)
}

#[inline]
fn gp_at(t: &mut Tensor, c: usize, y: usize, x: usize, h: usize, w: usize) -> &mut f64 {
    &mut t.data_mut()[(c * h + y) * w + x]
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

#[inline]
pub(crate) fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus_value(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check_gradients, GradCheck};
    use super::*;

    fn seeded(shape: &[usize], seed: u64) -> Tensor {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        Tensor::from_fn(shape, |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn add_mul_values_and_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]));
        let prod = tape.mul(a, b);
        let total = tape.sum_all(prod);
        assert_eq!(tape.value(total).item(), 32.0);

        let grads = tape.backward(total);
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn gradients_of_unused_nodes_are_absent() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::scalar(7.0));
        let doubled = tape.scale(a, 2.0);
        let grads = tape.backward(doubled);
        assert!(grads.get(a).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let x = seeded(&[2, 3, 3], 5);
        // Keep strictly positive for mu-law / pow paths.
        let xpos = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|v| 0.3 + 0.2 * v.abs()).collect(),
        );

        type OpCase = (
            &'static str,
            Box<dyn Fn(&mut Tape, NodeId) -> NodeId>,
            Tensor,
        );
        let cases: Vec<OpCase> = vec![
            (
                "leaky_relu",
                Box::new(|t, a| t.leaky_relu(a, 0.1)),
                x.clone(),
            ),
            ("softplus", Box::new(|t, a| t.softplus(a)), x.clone()),
            ("sigmoid", Box::new(|t, a| t.sigmoid(a)), x.clone()),
            ("mu_law", Box::new(|t, a| t.mu_law(a, 5000.0)), xpos.clone()),
            (
                "mu_expand",
                Box::new(|t, a| t.mu_expand(a, 5000.0)),
                xpos.clone(),
            ),
            (
                "pow_gamma",
                Box::new(|t, a| t.pow_gamma(a, 2.2)),
                xpos.clone(),
            ),
            ("upsample2", Box::new(|t, a| t.upsample2(a)), x.clone()),
        ];

        for (name, op, input) in cases {
            let report = check_gradients(&GradCheck::default(), &[input], |tape, ids| {
                let y = op(tape, ids[0]);
                // A fixed quadratic head makes the scalar depend on every
                // output element with distinct weights.
                let sq = tape.mul(y, y);
                tape.sum_all(sq)
            });
            assert!(
                report.max_rel_error < 1e-3,
                "{name}: rel error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn broadcast_ops_match_finite_differences() {
        let single = Tensor::new(vec![1, 3, 2], vec![0.5, -0.2, 0.8, 0.1, -0.7, 0.4]);
        let multi = seeded(&[3, 3, 2], 8);

        let report = check_gradients(
            &GradCheck::default(),
            &[single.clone(), multi.clone()],
            |tape, ids| {
                let prod = tape.mul_broadcast(ids[0], ids[1]);
                tape.sum_all(prod)
            },
        );
        assert!(
            report.max_rel_error < 1e-3,
            "mul_broadcast: {}",
            report.max_rel_error
        );

        // Denominator bounded away from -eps.
        let den = Tensor::new(vec![1, 3, 2], vec![0.9, 1.4, 0.6, 2.0, 1.1, 0.7]);
        let report = check_gradients(&GradCheck::default(), &[multi, den], |tape, ids| {
            let q = tape.div_stabilized(ids[0], ids[1], 1e-8);
            let sq = tape.mul(q, q);
            tape.sum_all(sq)
        });
        assert!(
            report.max_rel_error < 1e-3,
            "div_stabilized: {}",
            report.max_rel_error
        );
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(seeded(&[2, 2, 2], 1));
        let b = tape.leaf(seeded(&[3, 2, 2], 2));
        let cat = tape.concat_c(&[a, b]);
        assert_eq!(tape.value(cat).shape(), &[5, 2, 2]);
        let back = tape.slice_c(cat, 2, 3);
        assert_eq!(tape.value(back).data(), tape.value(b).data());

        let total = tape.sum_all(back);
        let grads = tape.backward(total);
        // Only the sliced part contributes; the rest of the concat input sees
        // a zero gradient.
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(
            grads.get(b).unwrap().data(),
            Tensor::full(&[3, 2, 2], 1.0).data()
        );
    }

    #[test]
    fn upsample2_doubles_and_preserves_constants() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[1, 3, 5], 0.7));
        let up = tape.upsample2(a);
        assert_eq!(tape.value(up).shape(), &[1, 6, 10]);
        for &v in tape.value(up).data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }
}
