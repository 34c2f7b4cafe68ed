//! Central finite-difference gradient verification.
//!
//! Independent of the tape's backward pass by construction: the numeric side
//! only ever calls the forward evaluation of the function under test.

use super::{NodeId, Tape};
use crate::tensor::Tensor;

pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Relative error denominator floor; below it the comparison is absolute.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
        }
    }
}

pub struct GradReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compare analytic gradients of `build` (a scalar-rooted tape program over
/// the leaf inputs) against central finite differences for every coordinate
/// of every input.
pub fn check_gradients(
    cfg: &GradCheck,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> GradReport {
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        tape.value(root).item()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &ids);
    let mut grads = tape.backward(root);
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, input)| {
            grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros(input.shape()))
        })
        .collect();

    // Numeric pass, one coordinate at a time.
    let mut numeric: Vec<Tensor> = inputs.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let original = work[i].data()[e];
            work[i].data_mut()[e] = original + cfg.step;
            let plus = eval(&work);
            work[i].data_mut()[e] = original - cfg.step;
            let minus = eval(&work);
            work[i].data_mut()[e] = original;
            numeric[i].data_mut()[e] = (plus - minus) / (2.0 * cfg.step);
        }
    }

    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        for e in 0..inputs[i].numel() {
            let a = analytic[i].data()[e];
            let n = numeric[i].data()[e];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(cfg.floor);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (i, e);
            }
        }
    }

    GradReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    }
}
