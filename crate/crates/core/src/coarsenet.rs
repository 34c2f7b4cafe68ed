//! Stage 1: image-space alignment and fusion.
//!
//! A flow network predicts displacements for both neighbors from a stack of
//! exposure-matched frames, the neighbors are backward-warped to the center,
//! and a weight network blends the five candidate images in the linear
//! radiance domain. Flow heads are zero-initialized so training starts from
//! identity alignment.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{grid_sample_flow, NodeId, Tape};
use crate::error::{Error, Result};
use crate::frame::{FlowField, LdrFrame, RadianceFrame, MU};
use crate::nn::{Conv2d, Init, ParamSet};
use crate::radiometry::{ldr_to_radiance, mu_tonemap_value, radiance_to_ldr};
use crate::raster::ImageBuf;
use crate::tensor::Tensor;

/// Stabilizer added to the blending denominator.
pub const BLEND_EPS: f64 = 1e-8;

/// Spatial downsampling factor of the coarse stage; input sides must be
/// divisible by it.
pub const COARSE_FACTOR: usize = 16;

/// Architecture knobs. All channel counts scale together so desk-size tests
/// can shrink the model without changing its structure.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoarseConfig {
    /// Flow encoder channels for the four pyramid levels (1/2 .. 1/16).
    pub flow_channels: [usize; 4],
    /// Base channel count of the blending-weight encoder-decoder.
    pub weight_base: usize,
}

impl Default for CoarseConfig {
    fn default() -> Self {
        Self {
            flow_channels: [16, 32, 64, 96],
            weight_base: 32,
        }
    }
}

impl CoarseConfig {
    /// Shrink every channel count by `factor` (e.g. 0.25), keeping at least
    /// two channels per layer.
    pub fn scaled(factor: f64) -> Self {
        let full = Self::default();
        let s = |c: usize| (((c as f64) * factor).round() as usize).max(2);
        Self {
            flow_channels: [
                s(full.flow_channels[0]),
                s(full.flow_channels[1]),
                s(full.flow_channels[2]),
                s(full.flow_channels[3]),
            ],
            weight_base: s(full.weight_base),
        }
    }
}

/// Per-pixel nonnegative blending maps for the five candidate images.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    maps: ImageBuf,
}

impl BlendWeights {
    pub fn new(maps: ImageBuf) -> Result<Self> {
        if maps.channels() != 5 {
            return Err(Error::shape(
                "blend weights must have 5 channels".to_string(),
            ));
        }
        if maps.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid(
                "blend weights must be nonnegative and finite".to_string(),
            ));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &ImageBuf {
        &self.maps
    }
}

struct FlowNet {
    enc: Vec<(Conv2d, Conv2d)>,
    head_top: Conv2d,
    refine: Vec<(Conv2d, Conv2d)>,
}

struct WeightNet {
    enc0: (Conv2d, Conv2d),
    down: Vec<(Conv2d, Conv2d)>,
    up: Vec<Conv2d>,
    head: Conv2d,
}

/// Stage-1 model: flow network plus blending-weight network.
pub struct CoarseModel {
    pub config: CoarseConfig,
    /// Exposure schedule period the model was built for (2 or 3); period 3
    /// feeds the flow network two exposure-matched copies of the reference.
    pub period: usize,
    pub params: ParamSet,
    flow: FlowNet,
    weight: WeightNet,
}

impl CoarseModel {
    pub fn new(config: CoarseConfig, period: usize, seed: u64) -> Result<Self> {
        if period != 2 && period != 3 {
            return Err(Error::invalid(format!(
                "schedule period must be 2 or 3, got {period}"
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let ch = config.flow_channels;
        let flow_in = flow_input_channels(period);

        let mut enc = Vec::new();
        let mut prev = flow_in;
        for (i, &c) in ch.iter().enumerate() {
            let a = Conv2d::new(
                &mut params,
                &mut rng,
                &format!("flow.enc{i}.a"),
                prev,
                c,
                3,
                2,
                Init::HeNormal,
            );
            let b = Conv2d::new(
                &mut params,
                &mut rng,
                &format!("flow.enc{i}.b"),
                c,
                c,
                3,
                1,
                Init::HeNormal,
            );
            enc.push((a, b));
            prev = c;
        }
        let head_top = Conv2d::new(
            &mut params,
            &mut rng,
            "flow.head3",
            ch[3],
            4,
            3,
            1,
            Init::Zero,
        );
        let mut refine = Vec::new();
        for i in (0..3).rev() {
            let feat = Conv2d::new(
                &mut params,
                &mut rng,
                &format!("flow.refine{i}.feat"),
                ch[i] + 4,
                ch[i],
                3,
                1,
                Init::HeNormal,
            );
            let head = Conv2d::new(
                &mut params,
                &mut rng,
                &format!("flow.refine{i}.head"),
                ch[i],
                4,
                3,
                1,
                Init::Zero,
            );
            refine.push((feat, head));
        }

        let b0 = config.weight_base;
        let enc0 = (
            Conv2d::new(
                &mut params,
                &mut rng,
                "weight.enc0.a",
                30,
                b0,
                3,
                1,
                Init::HeNormal,
            ),
            Conv2d::new(
                &mut params,
                &mut rng,
                "weight.enc0.b",
                b0,
                b0,
                3,
                1,
                Init::HeNormal,
            ),
        );
        let widths = [b0 * 2, b0 * 4, b0 * 4];
        let mut down = Vec::new();
        let mut prev = b0;
        for (i, &c) in widths.iter().enumerate() {
            let a = Conv2d::new(
                &mut params,
                &mut rng,
                &format!("weight.down{i}.a"),
                prev,
                c,
                3,
                2,
                Init::HeNormal,
            );
            let b = Conv2d::new(
                &mut params,
                &mut rng,
                &format!("weight.down{i}.b"),
                c,
                c,
                3,
                1,
                Init::HeNormal,
            );
            down.push((a, b));
            prev = c;
        }
        // Decoder skips concatenate the encoder feature at the same scale.
        let up = vec![
            Conv2d::new(
                &mut params,
                &mut rng,
                "weight.up2",
                widths[2] + widths[1],
                widths[1],
                3,
                1,
                Init::HeNormal,
            ),
            Conv2d::new(
                &mut params,
                &mut rng,
                "weight.up1",
                widths[1] + widths[0],
                widths[0],
                3,
                1,
                Init::HeNormal,
            ),
            Conv2d::new(
                &mut params,
                &mut rng,
                "weight.up0",
                widths[0] + b0,
                b0,
                3,
                1,
                Init::HeNormal,
            ),
        ];
        let head = Conv2d::new(
            &mut params,
            &mut rng,
            "weight.head",
            b0,
            5,
            3,
            1,
            Init::HeNormal,
        );

        Ok(Self {
            config,
            period,
            params,
            flow: FlowNet {
                enc,
                head_top,
                refine,
            },
            weight: WeightNet {
                enc0,
                down,
                up,
                head,
            },
        })
    }

    fn flow_forward(&self, tape: &mut Tape, pids: &[NodeId], input: NodeId) -> NodeId {
        let mut feats = Vec::new();
        let mut cur = input;
        for (a, b) in &self.flow.enc {
            let x = a.apply(tape, pids, cur);
            let x = tape.leaky_relu(x, 0.1);
            let x = b.apply(tape, pids, x);
            cur = tape.leaky_relu(x, 0.1);
            feats.push(cur);
        }
        let mut flow = self.flow.head_top.apply(tape, pids, feats[3]);
        for (step, (feat_conv, head)) in self.flow.refine.iter().enumerate() {
            let level = 2 - step; // levels 2, 1, 0
            let up = tape.upsample2(flow);
            let up = tape.scale(up, 2.0);
            let cat = tape.concat_c(&[feats[level], up]);
            let r = feat_conv.apply(tape, pids, cat);
            let r = tape.leaky_relu(r, 0.1);
            let delta = head.apply(tape, pids, r);
            flow = tape.add(up, delta);
        }
        let full = tape.upsample2(flow);
        tape.scale(full, 2.0)
    }

    fn weight_forward(&self, tape: &mut Tape, pids: &[NodeId], input: NodeId) -> NodeId {
        let x = self.weight.enc0.0.apply(tape, pids, input);
        let x = tape.leaky_relu(x, 0.1);
        let x = self.weight.enc0.1.apply(tape, pids, x);
        let e0 = tape.leaky_relu(x, 0.1);

        let mut skips = vec![e0];
        let mut cur = e0;
        for (a, b) in &self.weight.down {
            let x = a.apply(tape, pids, cur);
            let x = tape.leaky_relu(x, 0.1);
            let x = b.apply(tape, pids, x);
            cur = tape.leaky_relu(x, 0.1);
            skips.push(cur);
        }

        for (i, conv) in self.weight.up.iter().enumerate() {
            let skip = skips[skips.len() - 2 - i];
            let up = tape.upsample2(cur);
            let cat = tape.concat_c(&[up, skip]);
            let x = conv.apply(tape, pids, cat);
            cur = tape.leaky_relu(x, 0.1);
        }

        let logits = self.weight.head.apply(tape, pids, cur);
        tape.softplus(logits)
    }
}

/// Channels of the flow-network input stack for a schedule period.
pub fn flow_input_channels(period: usize) -> usize {
    if period == 3 {
        12
    } else {
        9
    }
}

/// Exposure-match the reference into the neighbor LDR domain and stack
/// `[L_prev, g(I_ref), L_next]` into one 9-channel image (two-exposure case;
/// both neighbors share an exposure).
pub fn prepare_flow_input(
    prev: &LdrFrame,
    reference: &LdrFrame,
    next: &LdrFrame,
) -> Result<ImageBuf> {
    if prev.dims() != reference.dims() || next.dims() != reference.dims() {
        return Err(Error::shape(
            "flow input frames must share dimensions".to_string(),
        ));
    }
    let radiance = ldr_to_radiance(reference)?;
    let matched = radiance_to_ldr(&radiance, prev.exposure_t(), reference.gamma())?;
    Ok(stack_channels(&[
        prev.pixels(),
        matched.pixels(),
        next.pixels(),
    ]))
}

/// Three-exposure variant: the reference is matched separately to each
/// neighbor's exposure, giving `[L_prev, g_prev(I_ref), g_next(I_ref),
/// L_next]` (12 channels).
pub fn prepare_flow_input_3exp(
    prev: &LdrFrame,
    reference: &LdrFrame,
    next: &LdrFrame,
) -> Result<ImageBuf> {
    if prev.dims() != reference.dims() || next.dims() != reference.dims() {
        return Err(Error::shape(
            "flow input frames must share dimensions".to_string(),
        ));
    }
    let radiance = ldr_to_radiance(reference)?;
    let to_prev = radiance_to_ldr(&radiance, prev.exposure_t(), reference.gamma())?;
    let to_next = radiance_to_ldr(&radiance, next.exposure_t(), reference.gamma())?;
    Ok(stack_channels(&[
        prev.pixels(),
        to_prev.pixels(),
        to_next.pixels(),
        next.pixels(),
    ]))
}

fn stack_channels(parts: &[&ImageBuf]) -> ImageBuf {
    let (h, w, _) = parts[0].dims();
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = ImageBuf::zeros(h, w, total);
    let mut offset = 0;
    for part in parts {
        for y in 0..h {
            for x in 0..w {
                for c in 0..part.channels() {
                    out.set(y, x, offset + c, part.get(y, x, c));
                }
            }
        }
        offset += part.channels();
    }
    out
}

/// Run only the flow network, returning the two predicted flow fields
/// (toward the previous and next neighbor).
pub fn predict_flows(model: &CoarseModel, flow_input: &ImageBuf) -> Result<(FlowField, FlowField)> {
    let (h, w, c) = flow_input.dims();
    if c != flow_input_channels(model.period) {
        return Err(Error::shape(format!(
            "flow input has {c} channels, expected {}",
            flow_input_channels(model.period)
        )));
    }
    check_divisible(h, w)?;
    let mut tape = Tape::new();
    let pids = model.params.leaves(&mut tape);
    let input = tape.leaf(Tensor::from_image(flow_input));
    let flows = model.flow_forward(&mut tape, &pids, input);
    let t = tape.value(flows);
    Ok((flow_slice(t, 0)?, flow_slice(t, 2)?))
}

fn flow_slice(t: &Tensor, start_channel: usize) -> Result<FlowField> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let buf = ImageBuf::from_fn(h, w, 2, |y, x, c| t.at3(start_channel + c, y, x));
    FlowField::new(buf)
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(COARSE_FACTOR) || !w.is_multiple_of(COARSE_FACTOR) {
        return Err(Error::invalid(format!(
            "coarse stage needs sides divisible by {COARSE_FACTOR}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Weighted average of the five candidate radiance images (plain buffers).
///
/// `images` are ordered (I_prev, warped prev, I_ref, warped next, I_next).
/// The denominator carries a small stabilizer, so an all-zero weight pixel
/// yields zero instead of NaN.
pub fn blend_coarse(images: &[RadianceFrame; 5], weights: &BlendWeights) -> Result<RadianceFrame> {
    let (h, w, c) = images[0].dims();
    for img in images.iter() {
        if img.dims() != (h, w, c) {
            return Err(Error::shape(
                "blend images must share dimensions".to_string(),
            ));
        }
    }
    if weights.maps().dims() != (h, w, 5) {
        return Err(Error::shape(format!(
            "blend weights {:?} do not match images {}x{}",
            weights.maps().dims(),
            h,
            w
        )));
    }
    let out = ImageBuf::from_fn(h, w, c, |y, x, ch| {
        let mut num = 0.0;
        let mut den = BLEND_EPS;
        for (k, image) in images.iter().enumerate() {
            let wv = weights.maps().get(y, x, k);
            num += wv * image.pixels().get(y, x, ch);
            den += wv;
        }
        num / den
    });
    RadianceFrame::new(out)
}

/// Node handles produced by one coarse forward pass on a tape.
pub struct CoarseGraph {
    /// Coarse HDR estimate, [3, H, W].
    pub output: NodeId,
    /// Stacked flows [4, H, W] (prev dx, prev dy, next dx, next dy).
    pub flows: NodeId,
    /// Blending weights after the nonnegativity map, [5, H, W].
    pub weights: NodeId,
}

/// Build the full coarse forward pass on `tape` with parameters already
/// inserted as `pids`. `flow_override` replaces the predicted flows with
/// fixed values (oracle injection for tests and diagnostics).
pub fn coarse_forward_on_tape(
    tape: &mut Tape,
    model: &CoarseModel,
    pids: &[NodeId],
    window: &[LdrFrame; 3],
    flow_override: Option<&Tensor>,
) -> Result<CoarseGraph> {
    let (h, w, _) = window[1].dims();
    if window[0].dims() != window[1].dims() || window[2].dims() != window[1].dims() {
        return Err(Error::shape(
            "coarse window frames must share dimensions".to_string(),
        ));
    }
    check_divisible(h, w)?;

    let [prev, reference, next] = window;
    let flow_input = if model.period == 3 {
        prepare_flow_input_3exp(prev, reference, next)?
    } else {
        prepare_flow_input(prev, reference, next)?
    };

    // Radiance versions of the unwarped frames are constants.
    let rad_prev = ldr_to_radiance(prev)?;
    let rad_ref = ldr_to_radiance(reference)?;
    let rad_next = ldr_to_radiance(next)?;

    let input = tape.leaf(Tensor::from_image(&flow_input));
    let flows = match flow_override {
        Some(f) => {
            if f.shape() != [4, h, w] {
                return Err(Error::shape(format!(
                    "flow override shape {:?}, expected [4, {h}, {w}]",
                    f.shape()
                )));
            }
            tape.leaf(f.clone())
        }
        None => model.flow_forward(tape, pids, input),
    };
    let flow_prev = tape.slice_c(flows, 0, 2);
    let flow_next = tape.slice_c(flows, 2, 2);

    let ldr_prev = tape.leaf(Tensor::from_image(prev.pixels()));
    let ldr_ref = tape.leaf(Tensor::from_image(reference.pixels()));
    let ldr_next = tape.leaf(Tensor::from_image(next.pixels()));

    let warped_prev = grid_sample_flow(tape, ldr_prev, flow_prev);
    let warped_next = grid_sample_flow(tape, ldr_next, flow_next);

    // Warped LDR frames are converted to radiance on the tape so gradients
    // reach the flows through the same conversion applied to the constants.
    let gamma = reference.gamma();
    let rad_warped_prev = ldr_to_radiance_on_tape(tape, warped_prev, gamma, prev.exposure_t());
    let rad_warped_next = ldr_to_radiance_on_tape(tape, warped_next, gamma, next.exposure_t());

    let rad_prev_node = tape.leaf(Tensor::from_image(rad_prev.pixels()));
    let rad_ref_node = tape.leaf(Tensor::from_image(rad_ref.pixels()));
    let rad_next_node = tape.leaf(Tensor::from_image(rad_next.pixels()));

    // Ten images, LDR stack first then the radiance stack, in blend order.
    let weight_input = tape.concat_c(&[
        ldr_prev,
        warped_prev,
        ldr_ref,
        warped_next,
        ldr_next,
        rad_prev_node,
        rad_warped_prev,
        rad_ref_node,
        rad_warped_next,
        rad_next_node,
    ]);
    let weights = model.weight_forward(tape, pids, weight_input);

    let candidates = [
        rad_prev_node,
        rad_warped_prev,
        rad_ref_node,
        rad_warped_next,
        rad_next_node,
    ];
    let mut num: Option<NodeId> = None;
    let mut den: Option<NodeId> = None;
    for (k, &img) in candidates.iter().enumerate() {
        let wk = tape.slice_c(weights, k, 1);
        let weighted = tape.mul_broadcast(wk, img);
        num = Some(match num {
            Some(acc) => tape.add(acc, weighted),
            None => weighted,
        });
        den = Some(match den {
            Some(acc) => tape.add(acc, wk),
            None => wk,
        });
    }
    let output = tape.div_stabilized(num.unwrap(), den.unwrap(), BLEND_EPS);

    Ok(CoarseGraph {
        output,
        flows,
        weights,
    })
}

fn ldr_to_radiance_on_tape(tape: &mut Tape, ldr: NodeId, gamma: f64, exposure_t: f64) -> NodeId {
    let powed = tape.pow_gamma(ldr, gamma);
    tape.scale(powed, 1.0 / exposure_t)
}

/// Run the coarse stage on a window of three frames.
pub fn coarse_forward(model: &CoarseModel, window: &[LdrFrame; 3]) -> Result<RadianceFrame> {
    coarse_forward_with(model, window, None)
}

/// Like [`coarse_forward`] but allowing oracle flows to be injected.
pub fn coarse_forward_with(
    model: &CoarseModel,
    window: &[LdrFrame; 3],
    flow_override: Option<&Tensor>,
) -> Result<RadianceFrame> {
    let mut tape = Tape::new();
    let pids = model.params.leaves(&mut tape);
    let graph = coarse_forward_on_tape(&mut tape, model, &pids, window, flow_override)?;
    let out = tape.value(graph.output);
    if !out.is_finite() {
        return Err(Error::numerical("coarse output is not finite".to_string()));
    }
    RadianceFrame::new(out.to_image())
}

/// Mean absolute difference between the mu-law images of prediction and
/// ground truth.
pub fn coarse_loss(pred: &RadianceFrame, gt: &RadianceFrame) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "loss operands must share dimensions".to_string(),
        ));
    }
    let n = pred.pixels().data().len() as f64;
    let total: f64 = pred
        .pixels()
        .data()
        .iter()
        .zip(gt.pixels().data().iter())
        .map(|(&p, &g)| (mu_tonemap_value(p, MU) - mu_tonemap_value(g, MU)).abs())
        .sum();
    Ok(total / n)
}

/// Tape version of [`coarse_loss`] for training.
pub fn coarse_loss_on_tape(tape: &mut Tape, pred: NodeId, gt: NodeId) -> NodeId {
    let tp = tape.mu_law(pred, MU);
    let tg = tape.mu_law(gt, MU);
    let diff = tape.sub(tp, tg);
    let mag = tape.abs(diff);
    tape.mean_all(mag)
}
