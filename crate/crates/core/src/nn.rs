//! Parameter bookkeeping and the few layer types the two networks share:
//! named parameter sets, convolution layers with their initializers, the
//! Adam optimizer, and a fixed random convolutional pyramid that stands in
//! for a pretrained perceptual feature extractor at desk scale.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{conv2d, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter within a [`ParamSet`].
pub type ParamId = usize;

/// A named, ordered collection of parameter tensors. The order is the
/// serialization order and the gradient-accumulation order, so training is
/// deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Insert every parameter as a leaf on the tape, in registration order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Collect gradients for all parameters after a backward pass, producing
    /// zeros for parameters the loss did not touch.
    pub fn collect_grads(
        &self,
        grads: &mut crate::autodiff::Gradients,
        leaf_ids: &[NodeId],
    ) -> Vec<Tensor> {
        leaf_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                grads
                    .take(id)
                    .unwrap_or_else(|| Tensor::zeros(self.tensors[i].shape()))
            })
            .collect()
    }

    /// Restore tensor values by name; shapes must match exactly.
    pub fn load_named(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (name, tensor) in entries {
            let Some(idx) = self.names.iter().position(|n| n == name) else {
                return Err(Error::data(format!(
                    "checkpoint has unknown parameter {name}"
                )));
            };
            if self.tensors[idx].shape() != tensor.shape() {
                return Err(Error::data(format!(
                    "parameter {name} shape {:?} does not match checkpoint {:?}",
                    self.tensors[idx].shape(),
                    tensor.shape()
                )));
            }
            self.tensors[idx] = tensor.clone();
        }
        Ok(())
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-style normal scaled by fan-in; the default for hidden layers.
    HeNormal,
    /// All zeros; used for flow and offset heads so alignment starts from
    /// the identity.
    Zero,
}

/// A 2D convolution layer holding indices into a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &mut ParamSet,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = match init {
            Init::Zero => Tensor::zeros(&[out_ch, in_ch, kernel, kernel]),
            Init::HeNormal => {
                let fan_in = (in_ch * kernel * kernel) as f64;
                let std = (2.0 / fan_in).sqrt();
                let normal = Normal::new(0.0, std).expect("valid normal");
                Tensor::from_fn(&[out_ch, in_ch, kernel, kernel], |_| normal.sample(rng))
            }
        };
        let w = params.register(format!("{name}.weight"), weight);
        let b = params.register(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn apply(&self, tape: &mut Tape, param_ids: &[NodeId], x: NodeId) -> NodeId {
        conv2d(
            tape,
            x,
            param_ids[self.w],
            param_ids[self.b],
            self.stride,
            self.pad,
        )
    }
}

/// Adam with the usual defaults (beta 0.9/0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamSet) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            v: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter, in registration order.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for (i, grad) in grads.iter().enumerate() {
            let g = grad.data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.tensors[i].data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Fixed random convolutional pyramid used as the perceptual feature
/// extractor when no pretrained network is available. Three tap points at
/// full, half and quarter resolution; the weights are frozen constants
/// derived from the seed.
#[derive(Debug, Clone)]
pub struct PerceptualPyramid {
    layers: Vec<(Tensor, Tensor)>,
}

impl PerceptualPyramid {
    pub fn new(seed: u64, in_channels: usize) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let widths = [(in_channels, 8usize), (8, 16), (16, 24)];
        let layers = widths
            .iter()
            .map(|&(ci, co)| {
                let fan_in = (ci * 9) as f64;
                let std = (2.0 / fan_in).sqrt();
                let normal = Normal::new(0.0, std).expect("valid normal");
                (
                    Tensor::from_fn(&[co, ci, 3, 3], |_| normal.sample(&mut rng)),
                    Tensor::zeros(&[co]),
                )
            })
            .collect();
        Self { layers }
    }

    /// Feature maps at the three tap points. Gradients flow into `x` but the
    /// pyramid weights are constants.
    pub fn features(&self, tape: &mut Tape, x: NodeId) -> Vec<NodeId> {
        let mut taps = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let wi = tape.leaf(w.clone());
            let bi = tape.leaf(b.clone());
            let stride = if i == 0 { 1 } else { 2 };
            let conv = conv2d(tape, cur, wi, bi, stride, 1);
            cur = tape.leaky_relu(conv, 0.1);
            taps.push(cur);
        }
        taps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize (p - 3)^2 elementwise.
        let mut params = ParamSet::new();
        let id = params.register("p", Tensor::new(vec![2], vec![0.0, 10.0]));
        let mut adam = Adam::new(0.1, &params);
        for _ in 0..500 {
            let p = params.tensor(id).clone();
            let grad = Tensor::new(vec![2], p.data().iter().map(|v| 2.0 * (v - 3.0)).collect());
            adam.step(&mut params, &[grad]);
        }
        for &v in params.tensor(id).data() {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = ParamSet::new();
            let id = params.register("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]));
            let mut adam = Adam::new(0.01, &params);
            for step in 0..5 {
                let g = Tensor::from_fn(&[3], |i| ((i + step) as f64).sin());
                adam.step(&mut params, &[g]);
            }
            params.tensor(id).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_init_heads_start_at_zero() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let conv = Conv2d::new(&mut params, &mut rng, "head", 4, 2, 3, 1, Init::Zero);
        assert!(params.tensor(conv.w).data().iter().all(|&v| v == 0.0));
        assert!(params.tensor(conv.b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn perceptual_pyramid_shapes_and_determinism() {
        let p1 = PerceptualPyramid::new(7, 3);
        let p2 = PerceptualPyramid::new(7, 3);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[3, 8, 8], 0.4));
        let f1 = p1.features(&mut tape, x);
        assert_eq!(tape.value(f1[0]).shape(), &[8, 8, 8]);
        assert_eq!(tape.value(f1[1]).shape(), &[16, 4, 4]);
        assert_eq!(tape.value(f1[2]).shape(), &[24, 2, 2]);

        let x2 = tape.leaf(Tensor::full(&[3, 8, 8], 0.4));
        let f2 = p2.features(&mut tape, x2);
        for (a, b) in f1.iter().zip(f2.iter()) {
            assert_eq!(tape.value(*a).data(), tape.value(*b).data());
        }
    }
}
