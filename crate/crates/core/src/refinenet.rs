//! Stage 2: feature-space alignment and fusion over three coarse HDR frames.
//!
//! A shared extractor builds a three-level feature pyramid from each mu-law
//! compressed coarse frame. Neighbor features are aligned to the center with
//! pyramid-cascaded deformable convolutions (offsets predicted coarse to
//! fine, plus a final cascade refinement conditioned on the reference), then
//! fused under temporal attention and decoded back to radiance. The final
//! output keeps the coarse estimate where the reference frame was well
//! exposed and the refined estimate elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{deform_conv2d, NodeId, Tape};
use crate::error::{Error, Result};
use crate::frame::{ExposureRole, LdrFrame, RadianceFrame, WellExposedMask, MU};
use crate::nn::{Conv2d, Init, ParamSet, PerceptualPyramid};
use crate::radiometry::well_exposed_mask;
use crate::tensor::Tensor;

/// Pyramid depth of the feature extractor and the alignment module.
pub const PYRAMID_LEVELS: usize = 3;

/// Spatial downsampling factor of the refine stage.
pub const REFINE_FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    /// Feature channels at every pyramid level.
    pub feat_channels: usize,
    /// Deformable kernel size (k x k taps).
    pub kernel: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            feat_channels: 64,
            kernel: 3,
        }
    }
}

impl RefineConfig {
    pub fn scaled(factor: f64) -> Self {
        let full = Self::default();
        Self {
            feat_channels: (((full.feat_channels as f64) * factor).round() as usize).max(2),
            kernel: full.kernel,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// One level of a feature pyramid.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub level: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Learned per-tap sampling displacements for a deformable convolution.
#[derive(Debug, Clone)]
pub struct OffsetField {
    offsets: Tensor,
}

impl OffsetField {
    pub fn new(offsets: Tensor) -> Result<Self> {
        if offsets.shape().len() != 3 || !offsets.shape()[0].is_multiple_of(2) {
            return Err(Error::shape("offset field must be [2K, h, w]".to_string()));
        }
        if !offsets.is_finite() {
            return Err(Error::invalid("offsets must be finite".to_string()));
        }
        Ok(Self { offsets })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.offsets
    }
}

/// Oracle offsets for every alignment stage, used to bypass the offset
/// prediction heads in tests and diagnostics.
#[derive(Debug, Clone)]
pub struct PcdOffsets {
    pub level2: Tensor,
    pub level1: Tensor,
    pub level0: Tensor,
    pub cascade: Tensor,
}

impl PcdOffsets {
    /// All-zero offsets for an input of the given full-resolution size.
    pub fn zeros(taps: usize, h: usize, w: usize) -> Self {
        Self {
            level2: Tensor::zeros(&[2 * taps, h / 4, w / 4]),
            level1: Tensor::zeros(&[2 * taps, h / 2, w / 2]),
            level0: Tensor::zeros(&[2 * taps, h, w]),
            cascade: Tensor::zeros(&[2 * taps, h, w]),
        }
    }
}

/// Forced attention values, replacing the predicted maps where set.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionOverride {
    pub prev: Option<f64>,
    pub reference: Option<f64>,
    pub next: Option<f64>,
}

struct Extractor {
    head: (Conv2d, Conv2d),
    down: Vec<(Conv2d, Conv2d)>,
}

struct PcdLevel {
    concat_conv: Conv2d,
    offset_conv: Conv2d,
    offset_head: Conv2d,
    deform: Conv2d,
    fuse: Option<Conv2d>,
}

struct Attention {
    conv1: Conv2d,
    conv2: Conv2d,
    fuse: Conv2d,
}

struct Decoder {
    entry: Conv2d,
    down: [Conv2d; 2],
    mid: Conv2d,
    up: [Conv2d; 2],
    head: Conv2d,
}

/// Stage-2 model.
pub struct RefineModel {
    pub config: RefineConfig,
    pub params: ParamSet,
    extractor: Extractor,
    /// Levels ordered coarsest (2) to finest (0); shared by both neighbors.
    pcd: Vec<PcdLevel>,
    cascade: PcdLevel,
    attention: Attention,
    decoder: Decoder,
}

impl RefineModel {
    pub fn new(config: RefineConfig, seed: u64) -> Result<Self> {
        if config.kernel % 2 != 1 {
            return Err(Error::invalid("deformable kernel must be odd".to_string()));
        }
        let mut params = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let c = config.feat_channels;
        let k = config.kernel;
        let off_ch = 2 * config.taps();

        let head = (
            Conv2d::new(
                &mut params,
                &mut rng,
                "extract.head.a",
                3,
                c,
                3,
                1,
                Init::HeNormal,
            ),
            Conv2d::new(
                &mut params,
                &mut rng,
                "extract.head.b",
                c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
        );
        let mut down = Vec::new();
        for i in 1..PYRAMID_LEVELS {
            down.push((
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("extract.down{i}.a"),
                    c,
                    c,
                    3,
                    2,
                    Init::HeNormal,
                ),
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("extract.down{i}.b"),
                    c,
                    c,
                    3,
                    1,
                    Init::HeNormal,
                ),
            ));
        }

        let mut pcd = Vec::new();
        for level in (0..PYRAMID_LEVELS).rev() {
            let coarsest = level == PYRAMID_LEVELS - 1;
            let offset_in = if coarsest { c } else { c + off_ch };
            pcd.push(PcdLevel {
                concat_conv: Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("pcd.l{level}.concat"),
                    2 * c,
                    c,
                    3,
                    1,
                    Init::HeNormal,
                ),
                offset_conv: Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("pcd.l{level}.offset"),
                    offset_in,
                    c,
                    3,
                    1,
                    Init::HeNormal,
                ),
                offset_head: Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("pcd.l{level}.head"),
                    c,
                    off_ch,
                    3,
                    1,
                    Init::Zero,
                ),
                deform: Conv2d::new(
                    &mut params,
                    &mut rng,
                    &format!("pcd.l{level}.deform"),
                    c,
                    c,
                    k,
                    1,
                    Init::HeNormal,
                ),
                fuse: if coarsest {
                    None
                } else {
                    Some(Conv2d::new(
                        &mut params,
                        &mut rng,
                        &format!("pcd.l{level}.fuse"),
                        2 * c,
                        c,
                        3,
                        1,
                        Init::HeNormal,
                    ))
                },
            });
        }
        let cascade = PcdLevel {
            concat_conv: Conv2d::new(
                &mut params,
                &mut rng,
                "pcd.cascade.concat",
                2 * c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
            offset_conv: Conv2d::new(
                &mut params,
                &mut rng,
                "pcd.cascade.offset",
                c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
            offset_head: Conv2d::new(
                &mut params,
                &mut rng,
                "pcd.cascade.head",
                c,
                off_ch,
                3,
                1,
                Init::Zero,
            ),
            deform: Conv2d::new(
                &mut params,
                &mut rng,
                "pcd.cascade.deform",
                c,
                c,
                k,
                1,
                Init::HeNormal,
            ),
            fuse: None,
        };

        let attention = Attention {
            conv1: Conv2d::new(
                &mut params,
                &mut rng,
                "attention.conv1",
                2 * c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
            conv2: Conv2d::new(
                &mut params,
                &mut rng,
                "attention.conv2",
                c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
            fuse: Conv2d::new(
                &mut params,
                &mut rng,
                "attention.fuse",
                3 * c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
        };

        let decoder = Decoder {
            entry: Conv2d::new(
                &mut params,
                &mut rng,
                "decoder.entry",
                c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
            down: [
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    "decoder.down1",
                    c,
                    c,
                    3,
                    2,
                    Init::HeNormal,
                ),
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    "decoder.down2",
                    c,
                    c,
                    3,
                    2,
                    Init::HeNormal,
                ),
            ],
            mid: Conv2d::new(
                &mut params,
                &mut rng,
                "decoder.mid",
                c,
                c,
                3,
                1,
                Init::HeNormal,
            ),
            up: [
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    "decoder.up1",
                    2 * c,
                    c,
                    3,
                    1,
                    Init::HeNormal,
                ),
                Conv2d::new(
                    &mut params,
                    &mut rng,
                    "decoder.up0",
                    2 * c,
                    c,
                    3,
                    1,
                    Init::HeNormal,
                ),
            ],
            head: Conv2d::new(
                &mut params,
                &mut rng,
                "decoder.head",
                c,
                3,
                3,
                1,
                Init::HeNormal,
            ),
        };

        Ok(Self {
            config,
            params,
            extractor: Extractor { head, down },
            pcd,
            cascade,
            attention,
            decoder,
        })
    }

    /// Shared feature extractor: a three-level pyramid from a mu-law
    /// compressed coarse frame node ([3, H, W]).
    fn extract_on_tape(&self, tape: &mut Tape, pids: &[NodeId], mu_input: NodeId) -> Vec<NodeId> {
        let x = self.extractor.head.0.apply(tape, pids, mu_input);
        let x = tape.leaky_relu(x, 0.1);
        let x = self.extractor.head.1.apply(tape, pids, x);
        let mut cur = tape.leaky_relu(x, 0.1);
        let mut pyramid = vec![cur];
        for (a, b) in &self.extractor.down {
            let x = a.apply(tape, pids, cur);
            let x = tape.leaky_relu(x, 0.1);
            let x = b.apply(tape, pids, x);
            cur = tape.leaky_relu(x, 0.1);
            pyramid.push(cur);
        }
        pyramid
    }

    /// Pyramid-cascaded deformable alignment of a neighbor pyramid onto the
    /// reference pyramid; returns the aligned level-0 feature.
    fn pcd_on_tape(
        &self,
        tape: &mut Tape,
        pids: &[NodeId],
        neighbor: &[NodeId],
        reference: &[NodeId],
        oracle: Option<&PcdOffsets>,
    ) -> NodeId {
        let mut aligned_coarser: Option<NodeId> = None;
        let mut offsets_coarser: Option<NodeId> = None;
        for (idx, stage) in self.pcd.iter().enumerate() {
            let level = PYRAMID_LEVELS - 1 - idx;
            let nbr = neighbor[level];
            let refc = reference[level];
            let (h, w) = {
                let s = tape.value(nbr).shape();
                (s[1], s[2])
            };

            let cat = tape.concat_c(&[nbr, refc]);
            let feat = stage.concat_conv.apply(tape, pids, cat);
            let feat = tape.leaky_relu(feat, 0.1);
            let off_in = match offsets_coarser {
                Some(prev) => {
                    let up = tape.upsample2(prev);
                    let up = tape.scale(up, 2.0);
                    tape.concat_c(&[feat, up])
                }
                None => feat,
            };
            let off_feat = stage.offset_conv.apply(tape, pids, off_in);
            let off_feat = tape.leaky_relu(off_feat, 0.1);
            let offsets = match oracle {
                Some(o) => {
                    let t = match level {
                        2 => &o.level2,
                        1 => &o.level1,
                        _ => &o.level0,
                    };
                    tape.leaf(t.clone())
                }
                None => {
                    let raw = stage.offset_head.apply(tape, pids, off_feat);
                    tape.clamp_sym(raw, offset_limit(h, w))
                }
            };

            let sampled = deform_conv2d(
                tape,
                nbr,
                offsets,
                pids[stage.deform.w],
                pids[stage.deform.b],
            );
            let aligned = match (&stage.fuse, aligned_coarser) {
                (Some(fuse), Some(coarser)) => {
                    let up = tape.upsample2(coarser);
                    let cat = tape.concat_c(&[sampled, up]);
                    let fused = fuse.apply(tape, pids, cat);
                    tape.leaky_relu(fused, 0.1)
                }
                _ => tape.leaky_relu(sampled, 0.1),
            };
            aligned_coarser = Some(aligned);
            offsets_coarser = Some(offsets);
        }

        // Cascade refinement at full resolution, conditioned on the
        // reference feature.
        let aligned0 = aligned_coarser.expect("pyramid is nonempty");
        let (h, w) = {
            let s = tape.value(aligned0).shape();
            (s[1], s[2])
        };
        let cat = tape.concat_c(&[aligned0, reference[0]]);
        let feat = self.cascade.concat_conv.apply(tape, pids, cat);
        let feat = tape.leaky_relu(feat, 0.1);
        let feat = self.cascade.offset_conv.apply(tape, pids, feat);
        let feat = tape.leaky_relu(feat, 0.1);
        let offsets = match oracle {
            Some(o) => tape.leaf(o.cascade.clone()),
            None => {
                let raw = self.cascade.offset_head.apply(tape, pids, feat);
                tape.clamp_sym(raw, offset_limit(h, w))
            }
        };
        let sampled = deform_conv2d(
            tape,
            aligned0,
            offsets,
            pids[self.cascade.deform.w],
            pids[self.cascade.deform.b],
        );
        tape.leaky_relu(sampled, 0.1)
    }

    /// Temporal attention fusion of the three aligned level-0 features
    /// (middle one is the reference).
    pub fn attention_on_tape(
        &self,
        tape: &mut Tape,
        pids: &[NodeId],
        aligned: [NodeId; 3],
        overrides: AttentionOverride,
    ) -> NodeId {
        let reference = aligned[1];
        let forced = [overrides.prev, overrides.reference, overrides.next];
        let mut attended = Vec::with_capacity(3);
        for (i, &feat) in aligned.iter().enumerate() {
            let att = match forced[i] {
                Some(value) => {
                    let shape = tape.value(feat).shape().to_vec();
                    tape.leaf(Tensor::full(&shape, value))
                }
                None => {
                    let cat = tape.concat_c(&[feat, reference]);
                    let x = self.attention.conv1.apply(tape, pids, cat);
                    let x = tape.leaky_relu(x, 0.1);
                    let x = self.attention.conv2.apply(tape, pids, x);
                    tape.sigmoid(x)
                }
            };
            attended.push(tape.mul(feat, att));
        }
        let cat = tape.concat_c(&attended);
        let fused = self.attention.fuse.apply(tape, pids, cat);
        tape.leaky_relu(fused, 0.1)
    }

    /// Decoder: a small U-shaped reconstruction branch with two skip
    /// connections from the reference frame's encoder features; the head
    /// emits a mu-law image through a softplus.
    fn decode_on_tape(
        &self,
        tape: &mut Tape,
        pids: &[NodeId],
        fused: NodeId,
        ref_pyramid: &[NodeId],
    ) -> NodeId {
        let x = self.decoder.entry.apply(tape, pids, fused);
        let d0 = tape.leaky_relu(x, 0.1);
        let x = self.decoder.down[0].apply(tape, pids, d0);
        let d1 = tape.leaky_relu(x, 0.1);
        let x = self.decoder.down[1].apply(tape, pids, d1);
        let d2 = tape.leaky_relu(x, 0.1);
        let x = self.decoder.mid.apply(tape, pids, d2);
        let mid = tape.leaky_relu(x, 0.1);

        let up = tape.upsample2(mid);
        let cat = tape.concat_c(&[up, ref_pyramid[1]]);
        let x = self.decoder.up[0].apply(tape, pids, cat);
        let u1 = tape.leaky_relu(x, 0.1);

        let up = tape.upsample2(u1);
        let cat = tape.concat_c(&[up, ref_pyramid[0]]);
        let x = self.decoder.up[1].apply(tape, pids, cat);
        let u0 = tape.leaky_relu(x, 0.1);

        let logits = self.decoder.head.apply(tape, pids, u0);
        tape.softplus(logits)
    }
}

/// Offset magnitudes are clamped to half the spatial extent of their level.
fn offset_limit(h: usize, w: usize) -> f64 {
    (h.min(w) as f64) / 2.0
}

/// Handles from one refine forward pass.
pub struct RefineGraph {
    /// Refined radiance, [3, H, W].
    pub refined: NodeId,
    /// Mask-merged final output, [3, H, W].
    pub merged: NodeId,
}

/// Optional overrides for oracle-driven tests.
#[derive(Default)]
pub struct RefineOverrides<'a> {
    pub offsets_prev: Option<&'a PcdOffsets>,
    pub offsets_next: Option<&'a PcdOffsets>,
    pub attention: AttentionOverride,
}

/// Build the refine forward pass. The three coarse inputs are radiance nodes
/// (leaves at inference, coarse-stage outputs during joint finetuning);
/// `mask` is the reference frame's well-exposed mask as a [1, H, W] tensor.
pub fn refine_forward_on_tape(
    tape: &mut Tape,
    model: &RefineModel,
    pids: &[NodeId],
    coarse_window: [NodeId; 3],
    mask: &Tensor,
    overrides: &RefineOverrides,
) -> Result<RefineGraph> {
    let (h, w) = {
        let s = tape.value(coarse_window[1]).shape();
        (s[1], s[2])
    };
    for &node in &coarse_window {
        if tape.value(node).shape() != [3, h, w] {
            return Err(Error::shape(
                "refine inputs must be congruent [3, H, W] radiance tensors".to_string(),
            ));
        }
    }
    if mask.shape() != [1, h, w] {
        return Err(Error::shape(format!(
            "mask shape {:?}, expected [1, {h}, {w}]",
            mask.shape()
        )));
    }
    if h % REFINE_FACTOR != 0 || w % REFINE_FACTOR != 0 {
        return Err(Error::invalid(format!(
            "refine stage needs sides divisible by {REFINE_FACTOR}, got {h}x{w}"
        )));
    }

    // Mu-law compression bounds the extractor inputs.
    let mu_prev = tape.mu_law(coarse_window[0], MU);
    let mu_ref = tape.mu_law(coarse_window[1], MU);
    let mu_next = tape.mu_law(coarse_window[2], MU);

    let pyr_prev = model.extract_on_tape(tape, pids, mu_prev);
    let pyr_ref = model.extract_on_tape(tape, pids, mu_ref);
    let pyr_next = model.extract_on_tape(tape, pids, mu_next);

    let aligned_prev = model.pcd_on_tape(tape, pids, &pyr_prev, &pyr_ref, overrides.offsets_prev);
    let aligned_next = model.pcd_on_tape(tape, pids, &pyr_next, &pyr_ref, overrides.offsets_next);

    let fused = model.attention_on_tape(
        tape,
        pids,
        [aligned_prev, pyr_ref[0], aligned_next],
        overrides.attention,
    );

    let mu_out = model.decode_on_tape(tape, pids, fused, &pyr_ref);
    let refined = tape.mu_expand(mu_out, MU);

    // Final merge: keep the coarse result where the reference was well
    // exposed, the refined result elsewhere.
    let mask_node = tape.leaf(mask.clone());
    let inverse = tape.leaf(Tensor::new(
        mask.shape().to_vec(),
        mask.data().iter().map(|&m| 1.0 - m).collect(),
    ));
    let keep = tape.mul_broadcast(mask_node, coarse_window[1]);
    let replace = tape.mul_broadcast(inverse, refined);
    let merged = tape.add(keep, replace);

    Ok(RefineGraph { refined, merged })
}

/// Run the refine stage over three coarse radiance frames.
///
/// The well-exposed mask is derived from the reference LDR frame and its
/// exposure role; the output equals the coarse estimate wherever that mask
/// is 1 and the refined estimate wherever it is 0.
pub fn refine_forward(
    model: &RefineModel,
    coarse_window: &[RadianceFrame; 3],
    reference_ldr: &LdrFrame,
    role: ExposureRole,
) -> Result<RadianceFrame> {
    let mask = well_exposed_mask(reference_ldr, role)?;
    refine_forward_masked(model, coarse_window, &mask, &RefineOverrides::default())
}

/// [`refine_forward`] with an explicit mask and test overrides.
pub fn refine_forward_masked(
    model: &RefineModel,
    coarse_window: &[RadianceFrame; 3],
    mask: &WellExposedMask,
    overrides: &RefineOverrides,
) -> Result<RadianceFrame> {
    let mut tape = Tape::new();
    let pids = model.params.leaves(&mut tape);
    let nodes = [
        tape.leaf(Tensor::from_image(coarse_window[0].pixels())),
        tape.leaf(Tensor::from_image(coarse_window[1].pixels())),
        tape.leaf(Tensor::from_image(coarse_window[2].pixels())),
    ];
    let mask_t = Tensor::from_image(mask.weights());
    let graph = refine_forward_on_tape(&mut tape, model, &pids, nodes, &mask_t, overrides)?;
    let out = tape.value(graph.merged);
    if !out.is_finite() {
        return Err(Error::numerical("refine output is not finite".to_string()));
    }
    RadianceFrame::new(out.to_image())
}

/// Extract the shared-weight feature pyramid for one coarse frame.
pub fn extract_features(model: &RefineModel, coarse: &RadianceFrame) -> Result<Vec<FeatureMap>> {
    let (h, w, c) = coarse.dims();
    if c != 3 {
        return Err(Error::shape("extractor expects RGB radiance".to_string()));
    }
    if h % REFINE_FACTOR != 0 || w % REFINE_FACTOR != 0 {
        return Err(Error::invalid(format!(
            "feature extraction needs sides divisible by {REFINE_FACTOR}, got {h}x{w}"
        )));
    }
    let mut tape = Tape::new();
    let pids = model.params.leaves(&mut tape);
    let input = tape.leaf(Tensor::from_image(coarse.pixels()));
    let mu = tape.mu_law(input, MU);
    let pyramid = model.extract_on_tape(&mut tape, &pids, mu);
    Ok(pyramid
        .into_iter()
        .enumerate()
        .map(|(level, id)| FeatureMap {
            values: tape.value(id).clone(),
            level,
        })
        .collect())
}

/// Apply one deformable convolution with explicit offsets and kernel
/// parameters (weights `[Co, Ci, k, k]`, bias `[Co]`).
pub fn deformable_sample(
    feature: &FeatureMap,
    offsets: &OffsetField,
    weights: &Tensor,
    bias: &Tensor,
) -> Result<FeatureMap> {
    let (c, h, w) = (feature.channels(), feature.height(), feature.width());
    let k = weights.shape()[2];
    if offsets.tensor().shape() != [2 * k * k, h, w] {
        return Err(Error::shape(format!(
            "offsets {:?} do not match feature {}x{} with kernel {k}",
            offsets.tensor().shape(),
            h,
            w
        )));
    }
    if weights.shape()[1] != c {
        return Err(Error::shape("kernel input channels mismatch".to_string()));
    }
    let mut tape = Tape::new();
    let f = tape.leaf(feature.values.clone());
    let o = tape.leaf(offsets.tensor().clone());
    let wn = tape.leaf(weights.clone());
    let bn = tape.leaf(bias.clone());
    let out = deform_conv2d(&mut tape, f, o, wn, bn);
    Ok(FeatureMap {
        values: tape.value(out).clone(),
        level: feature.level,
    })
}

/// Align a neighbor pyramid to the reference pyramid; plain wrapper over the
/// tape implementation.
pub fn pcd_align(
    model: &RefineModel,
    neighbor: &[FeatureMap],
    reference: &[FeatureMap],
    oracle: Option<&PcdOffsets>,
) -> Result<FeatureMap> {
    if neighbor.len() != PYRAMID_LEVELS || reference.len() != PYRAMID_LEVELS {
        return Err(Error::shape(format!(
            "pcd_align expects {PYRAMID_LEVELS}-level pyramids"
        )));
    }
    for (n, r) in neighbor.iter().zip(reference.iter()) {
        if n.values.shape() != r.values.shape() {
            return Err(Error::shape("pyramids must be congruent".to_string()));
        }
    }
    let mut tape = Tape::new();
    let pids = model.params.leaves(&mut tape);
    let nbr: Vec<NodeId> = neighbor
        .iter()
        .map(|f| tape.leaf(f.values.clone()))
        .collect();
    let refr: Vec<NodeId> = reference
        .iter()
        .map(|f| tape.leaf(f.values.clone()))
        .collect();
    let out = model.pcd_on_tape(&mut tape, &pids, &nbr, &refr, oracle);
    Ok(FeatureMap {
        values: tape.value(out).clone(),
        level: 0,
    })
}

/// Fuse three aligned features under temporal attention (plain wrapper).
pub fn temporal_attention_fuse(
    model: &RefineModel,
    aligned: &[FeatureMap; 3],
    overrides: AttentionOverride,
) -> Result<FeatureMap> {
    let shape = aligned[0].values.shape();
    for f in aligned.iter() {
        if f.values.shape() != shape {
            return Err(Error::shape(
                "aligned features must be congruent".to_string(),
            ));
        }
    }
    let mut tape = Tape::new();
    let pids = model.params.leaves(&mut tape);
    let ids = [
        tape.leaf(aligned[0].values.clone()),
        tape.leaf(aligned[1].values.clone()),
        tape.leaf(aligned[2].values.clone()),
    ];
    let out = model.attention_on_tape(&mut tape, &pids, ids, overrides);
    Ok(FeatureMap {
        values: tape.value(out).clone(),
        level: 0,
    })
}

/// Components of the refine loss.
#[derive(Debug, Clone, Copy)]
pub struct RefineLossParts {
    pub l1: f64,
    pub perceptual: f64,
    /// Set when the reference was effectively perfectly exposed (less than
    /// half a pixel of mask complement) and the masked L1 term was skipped.
    pub l1_skipped: bool,
}

/// Masked L1 plus perceptual loss on mu-law images, built on the tape.
///
/// The L1 term is normalized by the number of not-well-exposed samples
/// (mask complement summed over pixels, broadcast across channels). A
/// reference with less than half a pixel's worth of mask complement counts
/// as perfectly exposed: the term is skipped rather than divided by a
/// vanishing count, which would blow up both the reported loss and the
/// gradient scale.
pub fn refine_loss_on_tape(
    tape: &mut Tape,
    merged: NodeId,
    gt: NodeId,
    mask: &Tensor,
    perceptual: Option<&PerceptualPyramid>,
) -> (NodeId, bool) {
    let channels = tape.value(merged).shape()[0] as f64;
    let t_pred = tape.mu_law(merged, MU);
    let t_gt = tape.mu_law(gt, MU);

    let uncovered_pixels: f64 = mask.data().iter().map(|&m| 1.0 - m).sum();
    let denom = uncovered_pixels * channels;
    let l1_skipped = uncovered_pixels < 0.5;

    let mut total: Option<NodeId> = None;
    if !l1_skipped {
        let diff = tape.sub(t_pred, t_gt);
        let mag = tape.abs(diff);
        let sum = tape.sum_all(mag);
        let l1 = tape.scale(sum, 1.0 / denom);
        total = Some(l1);
    }

    if let Some(pyramid) = perceptual {
        let fp = pyramid.features(tape, t_pred);
        let fg = pyramid.features(tape, t_gt);
        for (a, b) in fp.into_iter().zip(fg) {
            let diff = tape.sub(a, b);
            let mag = tape.abs(diff);
            let term = tape.mean_all(mag);
            total = Some(match total {
                Some(acc) => tape.add(acc, term),
                None => term,
            });
        }
    }

    let loss = total.unwrap_or_else(|| tape.leaf(Tensor::scalar(0.0)));
    (loss, l1_skipped)
}

/// Plain refine loss over frames.
pub fn refine_loss(
    pred_merged: &RadianceFrame,
    gt: &RadianceFrame,
    mask: &WellExposedMask,
    perceptual: Option<&PerceptualPyramid>,
) -> Result<RefineLossParts> {
    if pred_merged.dims() != gt.dims() {
        return Err(Error::shape(
            "loss operands must share dimensions".to_string(),
        ));
    }
    let (h, w, _) = pred_merged.dims();
    if mask.weights().dims() != (h, w, 1) {
        return Err(Error::shape("mask does not match frames".to_string()));
    }
    let mut tape = Tape::new();
    let p = tape.leaf(Tensor::from_image(pred_merged.pixels()));
    let g = tape.leaf(Tensor::from_image(gt.pixels()));
    let mask_t = Tensor::from_image(mask.weights());

    // Evaluate the two parts separately for reporting.
    let (l1_node, l1_skipped) = refine_loss_on_tape(&mut tape, p, g, &mask_t, None);
    let l1 = if l1_skipped {
        0.0
    } else {
        tape.value(l1_node).item()
    };
    let perceptual_value = match perceptual {
        Some(pyr) => {
            let all_ones = Tensor::full(&[1, h, w], 1.0);
            let (node, _) = refine_loss_on_tape(&mut tape, p, g, &all_ones, Some(pyr));
            tape.value(node).item()
        }
        None => 0.0,
    };
    Ok(RefineLossParts {
        l1,
        perceptual: perceptual_value,
        l1_skipped,
    })
}
