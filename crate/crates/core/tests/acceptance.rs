//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers when it holds.
//!
//! 1. Radiometry: round trips, mu-law endpoints and reference values, mask
//!    anchor points.
//! 2. Warping/deformable oracles: identities, integer shifts, half-pixel.
//! 3. Gradients: every differentiable operation against central finite
//!    differences in f64.
//! 4. Brute-force equivalence of the blend, merge and masked-loss formulas
//!    on random instances over 100 seeds.
//! 5. Synthetic identity pipeline with oracle zero flows/offsets.
//! 6. Two-stage overfit smoke training on ten 64x64 patches.
//! 7. Dataset machinery: static-stack merging and pair index arithmetic.
//! 8. Bit-determinism of fixed-seed training and reconstruction.

use std::path::PathBuf;

use hdrvid_core::autodiff::gradcheck::{check_gradients, GradCheck};
use hdrvid_core::autodiff::{conv2d, deform_conv2d, grid_sample_flow, Tape};
use hdrvid_core::coarsenet::{
    blend_coarse, coarse_forward_on_tape, coarse_forward_with, coarse_loss_on_tape, BlendWeights,
    CoarseConfig, CoarseModel, BLEND_EPS,
};
use hdrvid_core::datagen::export::export_dataset;
use hdrvid_core::datagen::{
    build_dynamic_pairs, merge_static_gt, synthesize_sequence, synthetic_radiance_video,
    AugmentConfig, ExposureSchedule,
};
use hdrvid_core::frame::FlowField;
use hdrvid_core::frame::{ExposureRole, LdrFrame, RadianceFrame, MU};
use hdrvid_core::geometry::{
    backward_warp, synthetic_texture, warp_similarity, SimilarityTransform,
};
use hdrvid_core::harness::{
    psnr_mu, reconstruct_video, train_stage, Checkpoint, ReconstructOptions, Stage, TrainConfig,
};
use hdrvid_core::nn::{ParamSet, PerceptualPyramid};
use hdrvid_core::radiometry::{
    ldr_to_radiance, mu_tonemap_value, radiance_to_ldr, well_exposed_mask, well_exposed_weight,
};
use hdrvid_core::raster::ImageBuf;
use hdrvid_core::refinenet::{
    refine_forward_masked, refine_forward_on_tape, refine_loss_on_tape, PcdOffsets, RefineConfig,
    RefineModel, RefineOverrides,
};
use hdrvid_core::tensor::Tensor;

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!(
        "hdrvid-accept-{tag}-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .unwrap()
            .as_nanos()
    ));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Small deterministic value stream for brute-force instances.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }
}

#[test]
fn criterion_1_radiometry_suite() {
    // Round trip LDR -> radiance -> LDR wherever unclipped.
    let mut worst_rel = 0.0f64;
    for i in 1..=999 {
        let l = i as f64 / 1000.0;
        for &t in &[0.25, 1.0, 4.0] {
            let frame = LdrFrame::with_default_gamma(ImageBuf::splat(1, 1, 1, l), t).unwrap();
            let radiance = ldr_to_radiance(&frame).unwrap();
            if radiance.pixels().get(0, 0, 0) * t <= 1.0 {
                let back = radiance_to_ldr(&radiance, t, 2.2).unwrap();
                worst_rel = worst_rel.max((back.pixels().get(0, 0, 0) - l).abs() / l);
            }
        }
    }
    assert!(worst_rel <= 1e-6, "round-trip relative error {worst_rel}");

    // Mu-law endpoints exact, mid value against the scalar oracle.
    assert_eq!(mu_tonemap_value(0.0, MU), 0.0);
    assert!((mu_tonemap_value(1.0, MU) - 1.0).abs() < 1e-15);
    let oracle = 501f64.ln() / 5001f64.ln();
    assert!((mu_tonemap_value(0.1, MU) - 0.729_874).abs() < 1e-5);
    assert!((mu_tonemap_value(0.1, MU) - oracle).abs() < 1e-12);

    // Mask anchor points.
    assert_eq!(well_exposed_weight(0.0, ExposureRole::Low), 0.0);
    assert!((well_exposed_weight(0.075, ExposureRole::Low) - 0.25).abs() < 1e-15);
    assert_eq!(well_exposed_weight(0.15, ExposureRole::Low), 1.0);
    assert_eq!(well_exposed_weight(0.9, ExposureRole::High), 1.0);

    println!(
        "[PASS] criterion 1: radiometry round-trip rel err {worst_rel:.2e}, mu-law(0.1) = {:.6}",
        mu_tonemap_value(0.1, MU)
    );
}

#[test]
fn criterion_2_warping_and_deformable_oracles() {
    // Zero-flow identity.
    let img = synthetic_texture(12, 14, 5);
    let zero_flow = FlowField::zeros(12, 14);
    let warped = backward_warp(&img, &zero_flow).unwrap();
    let id_err = img.max_abs_diff(&warped);
    assert!(id_err <= 1e-7, "zero-flow identity error {id_err}");

    // Constant integer flow equals an index shift with border clamping.
    let flow = FlowField::new(ImageBuf::from_fn(12, 14, 2, |_, _, c| {
        if c == 0 {
            3.0
        } else {
            -2.0
        }
    }))
    .unwrap();
    let shifted = backward_warp(&img, &flow).unwrap();
    for y in 0..12 {
        for x in 0..14 {
            let sy = (y as isize - 2).max(0) as usize;
            let sx = (x + 3).min(13);
            assert_eq!(shifted.get(y, x, 0), img.get(sy, sx, 0));
        }
    }

    // Bilinear half-pixel case is the exact midpoint.
    let two = ImageBuf::new(1, 2, 1, vec![0.25, 0.75]).unwrap();
    let half = warp_similarity(&two, &SimilarityTransform::translation(0.5, 0.0));
    assert_eq!(half.get(0, 1, 0), 0.5);

    // Zero-offset deformable convolution equals the standard convolution.
    let mut tape = Tape::new();
    let x = Tensor::from_fn(&[2, 8, 8], |i| ((i * 37) % 23) as f64 * 0.07 - 0.4);
    let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 29) % 19) as f64 * 0.05 - 0.3);
    let b = Tensor::from_fn(&[3], |i| i as f64 * 0.1);
    let xi = tape.leaf(x.clone());
    let oi = tape.leaf(Tensor::zeros(&[18, 8, 8]));
    let wi = tape.leaf(w.clone());
    let bi = tape.leaf(b.clone());
    let deform = deform_conv2d(&mut tape, xi, oi, wi, bi);
    let xi2 = tape.leaf(x);
    let wi2 = tape.leaf(w);
    let bi2 = tape.leaf(b);
    let standard = conv2d(&mut tape, xi2, wi2, bi2, 1, 1);
    let deform_err = tape.value(deform).max_abs_diff(tape.value(standard));
    assert!(deform_err <= 1e-5, "zero-offset error {deform_err}");

    println!(
        "[PASS] criterion 2: zero-flow identity {id_err:.2e}, integer shifts exact, half-pixel exact, zero-offset deform {deform_err:.2e}"
    );
}

#[test]
fn criterion_3_gradient_suite() {
    let cfg = GradCheck::default();
    let mut worst: (f64, &str) = (0.0, "none");
    let mut record = |name: &'static str, err: f64| {
        assert!(err < 1e-3, "{name} gradient error {err}");
        if err > worst.0 {
            worst = (err, name);
        }
    };

    // backward_warp (image and flow arguments).
    let img = Tensor::from_fn(&[2, 5, 5], |i| 0.1 + 0.03 * ((i % 11) as f64));
    let flow = Tensor::from_fn(&[2, 5, 5], |i| 0.27 + 0.11 * (((i % 5) as f64) - 2.0) / 2.0);
    let report = check_gradients(&cfg, &[img, flow], |tape, ids| {
        let out = grid_sample_flow(tape, ids[0], ids[1]);
        let sq = tape.mul(out, out);
        tape.sum_all(sq)
    });
    record("backward_warp", report.max_rel_error);

    // deformable_sample (all four arguments).
    let x = Tensor::from_fn(&[1, 6, 6], |i| 0.2 + 0.05 * ((i % 7) as f64));
    let offsets = Tensor::from_fn(&[18, 6, 6], |i| {
        0.21 + 0.07 * (((i % 5) as f64) - 2.0) / 2.0
    });
    let w = Tensor::from_fn(&[1, 1, 3, 3], |i| 0.1 * (i as f64 - 4.0));
    let b = Tensor::from_fn(&[1], |_| 0.05);
    let report = check_gradients(&cfg, &[x, offsets, w, b], |tape, ids| {
        let out = deform_conv2d(tape, ids[0], ids[1], ids[2], ids[3]);
        let sq = tape.mul(out, out);
        tape.sum_all(sq)
    });
    record("deformable_sample", report.max_rel_error);

    // blend_coarse (weights and image stack via the tape formula).
    let images: Vec<Tensor> = (0..5)
        .map(|k| Tensor::from_fn(&[3, 4, 4], |i| 0.05 + 0.04 * (((i + k * 13) % 17) as f64)))
        .collect();
    let weights = Tensor::from_fn(&[5, 4, 4], |i| 0.1 + 0.09 * ((i % 9) as f64));
    let mut inputs = images.clone();
    inputs.push(weights);
    let report = check_gradients(&cfg, &inputs, |tape, ids| {
        let mut num = None;
        let mut den = None;
        for k in 0..5 {
            let wk = tape.slice_c(ids[5], k, 1);
            let weighted = tape.mul_broadcast(wk, ids[k]);
            num = Some(match num {
                Some(acc) => tape.add(acc, weighted),
                None => weighted,
            });
            den = Some(match den {
                Some(acc) => tape.add(acc, wk),
                None => wk,
            });
        }
        let out = tape.div_stabilized(num.unwrap(), den.unwrap(), BLEND_EPS);
        let sq = tape.mul(out, out);
        tape.sum_all(sq)
    });
    record("blend_coarse", report.max_rel_error);

    // Temporal attention fusion.
    let attention_model = RefineModel::new(
        RefineConfig {
            feat_channels: 2,
            kernel: 3,
        },
        5,
    )
    .unwrap();
    let feats: Vec<Tensor> = (0..3)
        .map(|i| Tensor::from_fn(&[2, 4, 4], |e| 0.1 * ((e + i * 7) % 11) as f64 - 0.3))
        .collect();
    let mut inputs: Vec<Tensor> = feats;
    inputs.extend(attention_model.params.iter().map(|(_, t)| t.clone()));
    let report = check_gradients(&cfg, &inputs, |tape, ids| {
        let fused = attention_model.attention_on_tape(
            tape,
            &ids[3..],
            [ids[0], ids[1], ids[2]],
            Default::default(),
        );
        let sq = tape.mul(fused, fused);
        tape.sum_all(sq)
    });
    record("attention_fusion", report.max_rel_error);

    // Coarse loss through the full coarse forward on a 16x16 toy instance,
    // every parameter checked.
    let mut coarse = CoarseModel::new(
        CoarseConfig {
            flow_channels: [2, 2, 3, 3],
            weight_base: 2,
        },
        2,
        11,
    )
    .unwrap();
    jitter(&mut coarse.params, 77);
    let window = [
        textured_ldr(16, 16, 21, 4.0),
        textured_ldr(16, 16, 22, 1.0),
        textured_ldr(16, 16, 23, 4.0),
    ];
    let gt = {
        let tex = synthetic_texture(16, 16, 24);
        RadianceFrame::new(ImageBuf::from_fn(16, 16, 3, |y, x, _| {
            0.05 + 0.9 * tex.get(y, x, 0)
        }))
        .unwrap()
    };
    let inputs: Vec<Tensor> = coarse.params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&cfg, &inputs, |tape, ids| {
        let graph = coarse_forward_on_tape(tape, &coarse, ids, &window, None).unwrap();
        let gt_node = tape.leaf(Tensor::from_image(gt.pixels()));
        coarse_loss_on_tape(tape, graph.output, gt_node)
    });
    record("coarse_end_to_end", report.max_rel_error);

    // Refine loss (masked L1 + perceptual) through the full refine forward.
    let mut refine = RefineModel::new(
        RefineConfig {
            feat_channels: 2,
            kernel: 3,
        },
        5,
    )
    .unwrap();
    jitter(&mut refine.params, 99);
    let rwindow = [radiance(8, 8, 30), radiance(8, 8, 31), radiance(8, 8, 32)];
    let rgt = radiance(8, 8, 33);
    let mask = Tensor::from_fn(&[1, 8, 8], |i| 0.2 + 0.6 * ((i % 4) as f64) / 3.0);
    let perceptual = PerceptualPyramid::new(41, 3);
    let small = GradCheck {
        step: 1e-6,
        floor: 1e-4,
    };
    let inputs: Vec<Tensor> = refine.params.iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&small, &inputs, |tape, ids| {
        let nodes = [
            tape.leaf(Tensor::from_image(rwindow[0].pixels())),
            tape.leaf(Tensor::from_image(rwindow[1].pixels())),
            tape.leaf(Tensor::from_image(rwindow[2].pixels())),
        ];
        let graph = refine_forward_on_tape(
            tape,
            &refine,
            ids,
            nodes,
            &mask,
            &RefineOverrides::default(),
        )
        .unwrap();
        let gt_node = tape.leaf(Tensor::from_image(rgt.pixels()));
        let (loss, _) = refine_loss_on_tape(tape, graph.merged, gt_node, &mask, Some(&perceptual));
        loss
    });
    record("refine_end_to_end", report.max_rel_error);

    println!(
        "[PASS] criterion 3: all gradient checks <= 1e-3 relative; worst {} at {:.2e}",
        worst.1, worst.0
    );
}

#[test]
fn criterion_4_brute_force_equivalence() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = Lcg(seed.wrapping_mul(0x2545F4914F6CDD1D).wrapping_add(1));

        // Five-image blending on a random 4x4x3 instance.
        let images: [RadianceFrame; 5] = std::array::from_fn(|_| {
            RadianceFrame::new(ImageBuf::from_fn(4, 4, 3, |_, _, _| rng.next() * 2.0)).unwrap()
        });
        let weights = BlendWeights::new(ImageBuf::from_fn(4, 4, 5, |_, _, _| rng.next())).unwrap();
        let blended = blend_coarse(&images, &weights).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let mut num = 0.0;
                    let mut den = BLEND_EPS;
                    for (k, image) in images.iter().enumerate() {
                        num += weights.maps().get(y, x, k) * image.pixels().get(y, x, c);
                        den += weights.maps().get(y, x, k);
                    }
                    worst = worst.max((blended.pixels().get(y, x, c) - num / den).abs());
                }
            }
        }

        // Mask merge: H = M * Hc + (1 - M) * Hr, elementwise.
        let mask = ImageBuf::from_fn(4, 4, 1, |_, _, _| rng.next());
        let hc = ImageBuf::from_fn(4, 4, 3, |_, _, _| rng.next() * 3.0);
        let hr = ImageBuf::from_fn(4, 4, 3, |_, _, _| rng.next() * 3.0);
        let mut tape = Tape::new();
        let m = tape.leaf(Tensor::from_image(&mask));
        let inv = tape.leaf(Tensor::from_image(&mask.map(|v| 1.0 - v)));
        let hc_n = tape.leaf(Tensor::from_image(&hc));
        let hr_n = tape.leaf(Tensor::from_image(&hr));
        let keep = tape.mul_broadcast(m, hc_n);
        let replace = tape.mul_broadcast(inv, hr_n);
        let merged = tape.add(keep, replace);
        let merged_img = tape.value(merged).to_image();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let expect = mask.get(y, x, 0) * hc.get(y, x, c)
                        + (1.0 - mask.get(y, x, 0)) * hr.get(y, x, c);
                    worst = worst.max((merged_img.get(y, x, c) - expect).abs());
                }
            }
        }

        // Masked, count-normalized L1 against a scalar evaluation.
        let pred = RadianceFrame::new(merged_img.map(|v| v.max(0.0))).unwrap();
        let gt =
            RadianceFrame::new(ImageBuf::from_fn(4, 4, 3, |_, _, _| rng.next() * 3.0)).unwrap();
        let mask_t = Tensor::from_image(&mask);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_image(pred.pixels()));
        let g = tape.leaf(Tensor::from_image(gt.pixels()));
        let (loss, skipped) = refine_loss_on_tape(&mut tape, p, g, &mask_t, None);
        assert!(!skipped);
        let got = tape.value(loss).item();
        let mut num = 0.0;
        let mut den = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                den += (1.0 - mask.get(y, x, 0)) * 3.0;
                for c in 0..3 {
                    num += (mu_tonemap_value(pred.pixels().get(y, x, c), MU)
                        - mu_tonemap_value(gt.pixels().get(y, x, c), MU))
                    .abs();
                }
            }
        }
        worst = worst.max((got - num / den).abs());
    }
    assert!(worst <= 1e-6, "brute-force mismatch {worst}");
    println!("[PASS] criterion 4: blend/merge/loss match scalar oracles within {worst:.2e} over 100 seeds");
}

#[test]
fn criterion_5_synthetic_identity_pipeline() {
    // A static, noise-free scene whose radiance keeps every exposure
    // unclipped and every reference well exposed.
    let h = 32;
    let w = 32;
    let tex = synthetic_texture(h, w, 17);
    let scene = RadianceFrame::new(ImageBuf::from_fn(h, w, 3, |y, x, _| {
        0.02 + 0.17 * tex.get(y, x, 0)
    }))
    .unwrap();
    let hdr: Vec<RadianceFrame> = (0..5).map(|_| scene.clone()).collect();
    let schedule = ExposureSchedule::new(vec![1.0, 4.0]).unwrap();
    let sequence = synthesize_sequence(&hdr, &schedule).unwrap();

    // Sanity: the center reference really is fully well exposed.
    let reference = &sequence.frames()[2];
    let mask = well_exposed_mask(reference, schedule.role_for(2)).unwrap();
    assert_eq!(
        mask.weights().min(),
        1.0,
        "scene must be fully well-exposed"
    );

    let coarse = CoarseModel::new(
        CoarseConfig {
            flow_channels: [2, 2, 3, 3],
            weight_base: 2,
        },
        2,
        3,
    )
    .unwrap();
    let refine = RefineModel::new(
        RefineConfig {
            feat_channels: 2,
            kernel: 3,
        },
        4,
    )
    .unwrap();

    // Coarse pass with oracle zero flows for the middle three frames.
    let zero_flows = Tensor::zeros(&[4, h, w]);
    let mut coarse_outputs = Vec::new();
    for j in 1..=3 {
        let window = [
            sequence.frames()[j - 1].clone(),
            sequence.frames()[j].clone(),
            sequence.frames()[j + 1].clone(),
        ];
        coarse_outputs.push(coarse_forward_with(&coarse, &window, Some(&zero_flows)).unwrap());
    }
    let coarse_err = coarse_outputs[1].pixels().max_abs_diff(scene.pixels());

    // Refine pass with oracle zero offsets; the all-ones mask keeps the
    // coarse result everywhere.
    let zero_offsets = PcdOffsets::zeros(9, h, w);
    let overrides = RefineOverrides {
        offsets_prev: Some(&zero_offsets),
        offsets_next: Some(&zero_offsets),
        attention: Default::default(),
    };
    let merged = refine_forward_masked(
        &refine,
        &[
            coarse_outputs[0].clone(),
            coarse_outputs[1].clone(),
            coarse_outputs[2].clone(),
        ],
        &mask,
        &overrides,
    )
    .unwrap();

    let err = merged.pixels().max_abs_diff(scene.pixels());
    assert!(err <= 1e-3, "identity pipeline error {err}");
    println!(
        "[PASS] criterion 5: oracle identity pipeline recovers GT within {err:.2e} (coarse stage {coarse_err:.2e})"
    );
}

#[test]
fn criterion_6_overfit_smoke_training() {
    let data_dir = temp_dir("smoke-data");
    // Ten static 64x64 alternating-exposure patches with clipped highlights.
    let clips: Vec<(String, Vec<RadianceFrame>)> = (0..10)
        .map(|i| {
            (
                format!("patch{i}"),
                synthetic_radiance_video(64, 64, 5, 1000 + i as u64, 0.0, 0.0),
            )
        })
        .collect();
    let schedule = ExposureSchedule::new(vec![1.0, 4.0]).unwrap();
    let manifest = export_dataset(&clips, &schedule, &data_dir, false).unwrap();

    // The patches must exercise the refinement path: the low-exposure
    // reference needs genuinely under-exposed pixels, otherwise the mask is
    // all ones and the merge ignores the refined branch.
    {
        let seq = synthesize_sequence(&clips[0].1, &schedule).unwrap();
        let mask = well_exposed_mask(&seq.frames()[2], ExposureRole::Low).unwrap();
        assert!(
            mask.weights().min() < 0.9,
            "smoke patches have no under-exposed reference pixels"
        );
    }

    let base_config = |stage: Stage| TrainConfig {
        stage,
        manifest: manifest.clone(),
        init_from: None,
        epochs: 1000,
        batch_size: 2,
        learning_rate: 2e-3,
        lr_halving_period_epochs: 1000,
        seed: 5,
        arch_scale: 0.125,
        augment_enabled: false,
        augment: AugmentConfig::identity(),
        perceptual_enabled: false,
        max_steps: 0,
        checkpoint_every_epochs: 0,
    };

    // Stage 1: coarse.
    let out_c = temp_dir("smoke-coarse");
    let mut cfg = base_config(Stage::Coarse);
    cfg.max_steps = 300;
    let coarse_out = train_stage(&cfg, &out_c).unwrap();

    // Stage 2: refine.
    let out_r = temp_dir("smoke-refine");
    let mut cfg = base_config(Stage::Refine);
    cfg.init_from = Some(coarse_out.checkpoint_path.clone());
    cfg.learning_rate = 1e-3;
    cfg.max_steps = 400;
    let refine_out = train_stage(&cfg, &out_r).unwrap();

    // Stage 3: joint finetune.
    let out_f = temp_dir("smoke-finetune");
    let mut cfg = base_config(Stage::Finetune);
    cfg.init_from = Some(refine_out.checkpoint_path.clone());
    cfg.learning_rate = 2e-4;
    cfg.max_steps = 150;
    let finetune_out = train_stage(&cfg, &out_f).unwrap();

    let total_steps = coarse_out.steps + refine_out.steps + finetune_out.steps;
    assert!(total_steps <= 2000, "{total_steps} steps exceed the cap");

    // Loss reduction: the coarse objective against itself, and the refine
    // objective from the start of stage 2 to the end of the finetune.
    let coarse_ratio = coarse_out.final_loss / coarse_out.initial_loss;
    let refine_ratio = finetune_out.final_loss / refine_out.initial_loss;
    assert!(
        coarse_ratio < 0.1,
        "coarse loss only dropped to {:.1}% of initial",
        coarse_ratio * 100.0
    );
    assert!(
        refine_ratio < 0.1,
        "refine loss only dropped to {:.1}% of initial",
        refine_ratio * 100.0
    );

    // Mu-law PSNR of the final merged outputs on the training patches.
    let ckpt = Checkpoint::load(&finetune_out.checkpoint_path).unwrap();
    let coarse_model = ckpt.build_coarse().unwrap();
    let refine_model = ckpt.build_refine().unwrap();
    let mut psnrs = Vec::new();
    for (_, clip) in &clips {
        let seq = synthesize_sequence(clip, &schedule).unwrap();
        let (frames, _) = reconstruct_video(
            &coarse_model,
            Some(&refine_model),
            &seq,
            &ReconstructOptions::default(),
        )
        .unwrap();
        let center = &frames[2];
        assert!(center.refined);
        psnrs.push(psnr_mu(&center.radiance, &clip[2]).unwrap());
    }
    let mean_psnr = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    assert!(
        mean_psnr >= 35.0,
        "overfit PSNR {mean_psnr:.2} dB below 35 dB (per patch: {psnrs:.1?})"
    );

    println!(
        "[PASS] criterion 6: {total_steps} steps, coarse loss x{:.3}, refine loss x{:.3}, PSNR {mean_psnr:.2} dB",
        coarse_ratio, refine_ratio
    );

    for dir in [data_dir, out_c, out_r, out_f] {
        std::fs::remove_dir_all(dir).ok();
    }
}

#[test]
fn criterion_7_dataset_machinery() {
    // merge_static_gt is exact on noise-free forward-rendered stacks
    // wherever at least one exposure is well exposed.
    let scene = hdrvid_core::datagen::synthetic_radiance_scene(24, 24, 9);
    let exposures = [1.0, 4.0];
    let stacks: Vec<(f64, Vec<LdrFrame>)> = exposures
        .iter()
        .map(|&t| {
            let ldr = radiance_to_ldr(&scene, t, 2.2).unwrap();
            (t, vec![ldr])
        })
        .collect();
    let merged = merge_static_gt(&stacks).unwrap();
    let mut worst_rel = 0.0f64;
    for (got, want) in merged.pixels().data().iter().zip(scene.pixels().data()) {
        // Exactness holds where some exposure lands strictly inside (0, 1).
        let well_exposed = exposures.iter().any(|&t| {
            let l = (want * t).powf(1.0 / 2.2);
            l > 0.0 && l < 1.0
        });
        if well_exposed && *want > 1e-6 {
            worst_rel = worst_rel.max((got - want).abs() / want);
        }
    }
    assert!(worst_rel <= 1e-4, "merge relative error {worst_rel}");

    // Stride-1 / stride-2 pair structure by index arithmetic.
    let hdr = synthetic_radiance_video(16, 16, 9, 5, 0.0, 0.0);
    let sched = ExposureSchedule::new(vec![1.0, 4.0]).unwrap();
    let seq = synthesize_sequence(&hdr, &sched).unwrap();
    let (pairs, skipped) = build_dynamic_pairs(&seq, 4, &hdr[4]).unwrap();
    assert_eq!((pairs.len(), skipped), (2, 0));
    for (j, idx) in (2..=6).enumerate() {
        assert_eq!(
            pairs[0].inputs.frames()[j].pixels().data(),
            seq.frames()[idx].pixels().data()
        );
    }
    for (j, idx) in [0usize, 2, 4, 6, 8].into_iter().enumerate() {
        assert_eq!(
            pairs[1].inputs.frames()[j].pixels().data(),
            seq.frames()[idx].pixels().data()
        );
    }
    // Doubling rule: each in-bounds center yields exactly two pairs.
    let (edge_pairs, edge_skipped) = build_dynamic_pairs(&seq, 3, &hdr[3]).unwrap();
    assert_eq!((edge_pairs.len(), edge_skipped), (1, 1));

    println!(
        "[PASS] criterion 7: static merge within {worst_rel:.2e}, stride-1/stride-2 pair structure verified"
    );
}

#[test]
fn criterion_8_bit_determinism() {
    let data_dir = temp_dir("det-data");
    let clips = vec![
        (
            "c0".to_string(),
            synthetic_radiance_video(32, 32, 5, 40, 0.0, 0.0),
        ),
        (
            "c1".to_string(),
            synthetic_radiance_video(32, 32, 5, 41, 0.0, 0.0),
        ),
    ];
    let schedule = ExposureSchedule::new(vec![1.0, 4.0]).unwrap();
    let manifest = export_dataset(&clips, &schedule, &data_dir, false).unwrap();

    let config = TrainConfig {
        stage: Stage::Coarse,
        manifest,
        init_from: None,
        epochs: 1,
        batch_size: 2,
        learning_rate: 1e-4,
        lr_halving_period_epochs: 5,
        seed: 123,
        arch_scale: 0.1,
        augment_enabled: true,
        augment: AugmentConfig {
            noise_sigma: 1e-3,
            tone_jitter: 0.7,
            flips: true,
            crop: 32,
        },
        perceptual_enabled: false,
        max_steps: 2,
        checkpoint_every_epochs: 0,
    };

    let run = |tag: &str| {
        let out = temp_dir(tag);
        let outcome = train_stage(&config, &out).unwrap();
        let bytes = std::fs::read(&outcome.checkpoint_path).unwrap();
        (outcome.initial_loss, outcome.final_loss, bytes, out)
    };
    let (i1, f1, b1, d1) = run("det-a");
    let (i2, f2, b2, d2) = run("det-b");
    assert_eq!(i1.to_bits(), i2.to_bits(), "first-step losses differ");
    assert_eq!(f1.to_bits(), f2.to_bits(), "second-step losses differ");
    assert_eq!(b1, b2, "checkpoint bytes differ");

    // Fixed-seed reconstruction is bit-identical across runs.
    let coarse = CoarseModel::new(
        CoarseConfig {
            flow_channels: [2, 2, 3, 3],
            weight_base: 2,
        },
        2,
        9,
    )
    .unwrap();
    let refine = RefineModel::new(
        RefineConfig {
            feat_channels: 2,
            kernel: 3,
        },
        10,
    )
    .unwrap();
    let hdr = synthetic_radiance_video(16, 16, 6, 42, 0.7, 0.3);
    let seq = synthesize_sequence(&hdr, &schedule).unwrap();
    let opts = ReconstructOptions {
        align: true,
        align_seed: 7,
    };
    let (ra, _) = reconstruct_video(&coarse, Some(&refine), &seq, &opts).unwrap();
    let (rb, _) = reconstruct_video(&coarse, Some(&refine), &seq, &opts).unwrap();
    for (a, b) in ra.iter().zip(rb.iter()) {
        let ab = a.radiance.pixels().data();
        let bb = b.radiance.pixels().data();
        assert_eq!(ab.len(), bb.len());
        for (x, y) in ab.iter().zip(bb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "reconstruction differs");
        }
    }

    println!("[PASS] criterion 8: fixed-seed training and reconstruction are bit-identical");

    for dir in [data_dir, d1, d2] {
        std::fs::remove_dir_all(dir).ok();
    }
}

// --- shared helpers ---------------------------------------------------------

fn textured_ldr(h: usize, w: usize, seed: u64, t: f64) -> LdrFrame {
    let tex = synthetic_texture(h, w, seed);
    let rgb = ImageBuf::from_fn(h, w, 3, |y, x, c| {
        (tex.get(y, x, 0) * (0.8 + 0.1 * c as f64)).clamp(0.0, 1.0)
    });
    LdrFrame::with_default_gamma(rgb, t).unwrap()
}

fn radiance(h: usize, w: usize, seed: u64) -> RadianceFrame {
    let tex = synthetic_texture(h, w, seed);
    RadianceFrame::new(ImageBuf::from_fn(h, w, 3, |y, x, c| {
        (tex.get(y, x, 0) * (0.9 + 0.05 * c as f64)).max(1e-3)
    }))
    .unwrap()
}

fn jitter(params: &mut ParamSet, seed: u64) {
    let mut state = seed;
    for i in 0..params.len() {
        let structured = params.name(i).contains("head") && params.name(i).ends_with("bias");
        for (j, v) in params.tensor_mut(i).data_mut().iter_mut().enumerate() {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let noise = ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            if structured {
                *v = [0.11, -0.073, 0.063, -0.097][j % 4] + 0.01 * noise;
            } else {
                *v += 0.02 * noise;
            }
        }
    }
}
