//! Training loops for the three stages.
//!
//! All randomness (shuffling, augmentation) flows from the config seed, the
//! batch gradient is accumulated in a fixed order and the math is
//! single-threaded f64, so a run is bit-reproducible on the same machine.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::Tape;
use crate::coarsenet::{coarse_forward_on_tape, coarse_loss_on_tape, CoarseConfig, CoarseModel};
use crate::datagen::manifest::{resolve, DatasetManifest};
use crate::datagen::{augment, io as frameio, ExposureSchedule, LdrSequence, LdrsHdrPair};
use crate::error::{Error, Result};
use crate::frame::{LdrFrame, RadianceFrame};
use crate::nn::{Adam, ParamSet, PerceptualPyramid};
use crate::radiometry::well_exposed_mask;
use crate::refinenet::{
    refine_forward_on_tape, refine_loss_on_tape, RefineConfig, RefineModel, RefineOverrides,
};
use crate::tensor::Tensor;

use super::checkpoint::Checkpoint;
use super::config::{learning_rate_at, Stage, TrainConfig};

/// Seed of the fixed random perceptual pyramid; constant so that refine and
/// finetune stages optimize the same objective.
const PERCEPTUAL_SEED: u64 = 0x9e37_79b9;

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
}

/// Load every training pair referenced by a manifest into memory.
pub fn load_pairs(manifest: &DatasetManifest, manifest_path: &Path) -> Result<Vec<LdrsHdrPair>> {
    let mut pairs = Vec::new();
    for seq in &manifest.sequences {
        if seq.pairs.is_empty() {
            continue;
        }
        let window = if seq.period == 2 { 5usize } else { 7 };
        let half = window / 2;
        let schedule = ExposureSchedule::new(seq.exposures[..seq.period].to_vec())?;

        // Frames are loaded lazily and cached per sequence.
        let mut cache: Vec<Option<LdrFrame>> = vec![None; seq.frames.len()];
        let mut frame_at = |idx: usize| -> Result<LdrFrame> {
            if cache[idx].is_none() {
                let path = resolve(manifest_path, &seq.frames[idx]);
                let pixels = frameio::read_ldr_png(&path)?;
                cache[idx] = Some(LdrFrame::with_default_gamma(pixels, seq.exposures[idx])?);
            }
            Ok(cache[idx].clone().expect("just populated"))
        };

        for pair in &seq.pairs {
            let reach = half * pair.stride;
            if pair.center < reach || pair.center + reach >= seq.frames.len() {
                return Err(Error::data(format!(
                    "sequence {}: pair at center {} stride {} exceeds the sequence",
                    seq.id, pair.center, pair.stride
                )));
            }
            let mut frames = Vec::with_capacity(window);
            for k in 0..window {
                frames.push(frame_at(pair.center - reach + k * pair.stride)?);
            }
            let exposures: Vec<f64> = (0..seq.period).map(|j| frames[j].exposure_t()).collect();
            let pair_schedule = ExposureSchedule::new(exposures)?;
            let inputs = LdrSequence::new(frames, pair_schedule)?;

            let gt_path = resolve(manifest_path, &pair.gt);
            let gt_pixels = frameio::read_hdr_exr(&gt_path)?;
            // f32 storage can introduce vanishing negatives.
            let gt = RadianceFrame::new(gt_pixels.map(|v| v.max(0.0)))?;

            let role = schedule.role_for(pair.center);
            pairs.push(LdrsHdrPair::new(inputs, gt, role)?);
        }
    }
    if pairs.is_empty() {
        return Err(Error::data(
            "manifest defines no training pairs".to_string(),
        ));
    }
    Ok(pairs)
}

fn manifest_period(manifest: &DatasetManifest) -> Result<usize> {
    let mut period = None;
    for seq in &manifest.sequences {
        match period {
            None => period = Some(seq.period),
            Some(p) if p == seq.period => {}
            Some(p) => {
                return Err(Error::data(format!(
                    "mixed schedule periods in one dataset ({p} and {})",
                    seq.period
                )))
            }
        }
    }
    period.ok_or_else(|| Error::data("manifest has no sequences".to_string()))
}

/// Deterministic per-sample augmentation seed.
fn sample_seed(base: u64, epoch: usize, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(index as u64)
}

/// Run one training stage end to end: loads the dataset, builds or restores
/// the models, optimizes, writes periodic checkpoints plus a CSV loss curve,
/// and returns the final checkpoint path with the first and last batch
/// losses.
pub fn train_stage(config: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e.to_string()))?;

    let manifest = DatasetManifest::load(&config.manifest)?;
    let period = manifest_period(&manifest)?;
    let pairs = load_pairs(&manifest, &config.manifest)?;

    let init = match &config.init_from {
        Some(path) => Some(Checkpoint::load(path)?),
        None => None,
    };
    if let Some(ckpt) = &init {
        if ckpt.header.period != period {
            return Err(Error::config(format!(
                "checkpoint period {} does not match dataset period {period}",
                ckpt.header.period
            )));
        }
    }

    let mut coarse = match (&init, config.stage) {
        (Some(ckpt), _) if ckpt.header.coarse_config.is_some() => ckpt.build_coarse()?,
        (None, Stage::Coarse) => {
            CoarseModel::new(CoarseConfig::scaled(config.arch_scale), period, config.seed)?
        }
        _ => {
            return Err(Error::config(
                "this stage needs a checkpoint containing the coarse model".to_string(),
            ))
        }
    };

    let mut refine = match config.stage {
        Stage::Coarse => None,
        Stage::Refine => Some(match &init {
            Some(ckpt) if ckpt.header.refine_config.is_some() => ckpt.build_refine()?,
            _ => RefineModel::new(
                RefineConfig::scaled(config.arch_scale),
                config.seed ^ 0xABCD,
            )?,
        }),
        Stage::Finetune => match &init {
            Some(ckpt) if ckpt.header.refine_config.is_some() => Some(ckpt.build_refine()?),
            _ => {
                return Err(Error::config(
                    "finetune needs a checkpoint containing both stages".to_string(),
                ))
            }
        },
    };

    let perceptual = config
        .perceptual_enabled
        .then(|| PerceptualPyramid::new(PERCEPTUAL_SEED, 3));

    let log_path = out_dir.join("train_log.csv");
    let mut log =
        std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e.to_string()))?;
    writeln!(log, "step,epoch,learning_rate,loss")
        .map_err(|e| Error::io(&log_path, e.to_string()))?;

    let mut adam_coarse = Adam::new(config.learning_rate, &coarse.params);
    let mut adam_refine = refine
        .as_ref()
        .map(|m| Adam::new(config.learning_rate, &m.params));

    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut step = 0u64;
    let mut initial_loss = None;
    let mut final_loss = 0.0;

    'training: for epoch in 0..config.epochs {
        let lr = learning_rate_at(config.learning_rate, config.lr_halving_period_epochs, epoch);
        adam_coarse.learning_rate = lr;
        if let Some(a) = adam_refine.as_mut() {
            a.learning_rate = lr;
        }

        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);

        for batch in order.chunks(config.batch_size) {
            let mut coarse_acc = zeros_like(&coarse.params);
            let mut refine_acc = refine.as_ref().map(|m| zeros_like(&m.params));
            let mut batch_loss = 0.0;

            for &idx in batch {
                let pair = if config.augment_enabled {
                    augment(
                        &pairs[idx],
                        sample_seed(config.seed, epoch, idx),
                        &config.augment,
                    )?
                } else {
                    pairs[idx].clone()
                };
                let (loss, cg, rg) = match config.stage {
                    Stage::Coarse => {
                        let (l, g) = coarse_sample_grads(&coarse, &pair)?;
                        (l, Some(g), None)
                    }
                    Stage::Refine => {
                        let (l, g) = refine_sample_grads(
                            &coarse,
                            refine.as_ref().expect("stage refine has a model"),
                            &pair,
                            perceptual.as_ref(),
                        )?;
                        (l, None, Some(g))
                    }
                    Stage::Finetune => {
                        let (l, cg, rg) = finetune_sample_grads(
                            &coarse,
                            refine.as_ref().expect("finetune has both models"),
                            &pair,
                            perceptual.as_ref(),
                        )?;
                        (l, Some(cg), Some(rg))
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::numerical(format!("non-finite loss at step {step}")));
                }
                batch_loss += loss;
                if let Some(g) = cg {
                    accumulate(&mut coarse_acc, &g);
                }
                if let (Some(acc), Some(g)) = (refine_acc.as_mut(), rg) {
                    accumulate(acc, &g);
                }
            }

            let inv = 1.0 / batch.len() as f64;
            batch_loss *= inv;
            match config.stage {
                Stage::Coarse | Stage::Finetune => {
                    scale_grads(&mut coarse_acc, inv);
                    adam_coarse.step(&mut coarse.params, &coarse_acc);
                }
                Stage::Refine => {}
            }
            if let (Some(model), Some(acc), Some(adam)) =
                (refine.as_mut(), refine_acc.as_mut(), adam_refine.as_mut())
            {
                if config.stage != Stage::Coarse {
                    scale_grads(acc, inv);
                    adam.step(&mut model.params, acc);
                }
            }

            step += 1;
            initial_loss.get_or_insert(batch_loss);
            final_loss = batch_loss;
            writeln!(log, "{step},{epoch},{lr},{batch_loss}")
                .map_err(|e| Error::io(&log_path, e.to_string()))?;

            if config.max_steps > 0 && step >= config.max_steps {
                break 'training;
            }
        }

        if config.checkpoint_every_epochs > 0
            && (epoch + 1) % config.checkpoint_every_epochs == 0
            && epoch + 1 < config.epochs
        {
            let path = out_dir.join(format!("checkpoint_epoch{:03}.ckpt", epoch + 1));
            Checkpoint::from_models(
                Some(&coarse),
                refine.as_ref(),
                period,
                step,
                config.stage.as_str(),
            )
            .save(&path)?;
        }
    }

    let checkpoint_path = out_dir.join("checkpoint.ckpt");
    Checkpoint::from_models(
        Some(&coarse),
        refine.as_ref(),
        period,
        step,
        config.stage.as_str(),
    )
    .save(&checkpoint_path)?;

    Ok(TrainOutcome {
        checkpoint_path,
        log_path,
        initial_loss: initial_loss.unwrap_or(0.0),
        final_loss,
        steps: step,
    })
}

fn zeros_like(params: &ParamSet) -> Vec<Tensor> {
    params
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect()
}

fn accumulate(acc: &mut [Tensor], grads: &[Tensor]) {
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_assign(g);
    }
}

fn scale_grads(acc: &mut [Tensor], k: f64) {
    for a in acc.iter_mut() {
        a.scale_in_place(k);
    }
}

/// The three-frame window centered on the pair's reference frame.
fn center_window(pair: &LdrsHdrPair) -> [LdrFrame; 3] {
    let c = pair.center_index();
    [
        pair.inputs.frames()[c - 1].clone(),
        pair.inputs.frames()[c].clone(),
        pair.inputs.frames()[c + 1].clone(),
    ]
}

fn coarse_sample_grads(model: &CoarseModel, pair: &LdrsHdrPair) -> Result<(f64, Vec<Tensor>)> {
    let window = center_window(pair);
    let mut tape = Tape::new();
    let pids = model.params.leaves(&mut tape);
    let graph = coarse_forward_on_tape(&mut tape, model, &pids, &window, None)?;
    let gt = tape.leaf(Tensor::from_image(pair.target.pixels()));
    let loss = coarse_loss_on_tape(&mut tape, graph.output, gt);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss);
    Ok((value, model.params.collect_grads(&mut grads, &pids)))
}

/// The coarse HDR estimates for the middle three frames of a pair window,
/// computed without gradients.
fn coarse_middle_three(model: &CoarseModel, pair: &LdrsHdrPair) -> Result<[Tensor; 3]> {
    let c = pair.center_index();
    let mut outputs = Vec::with_capacity(3);
    for j in [c - 1, c, c + 1] {
        let window = [
            pair.inputs.frames()[j - 1].clone(),
            pair.inputs.frames()[j].clone(),
            pair.inputs.frames()[j + 1].clone(),
        ];
        let mut tape = Tape::new();
        let pids = model.params.leaves(&mut tape);
        let graph = coarse_forward_on_tape(&mut tape, model, &pids, &window, None)?;
        outputs.push(tape.value(graph.output).clone());
    }
    Ok([outputs[0].clone(), outputs[1].clone(), outputs[2].clone()])
}

fn refine_sample_grads(
    coarse: &CoarseModel,
    refine: &RefineModel,
    pair: &LdrsHdrPair,
    perceptual: Option<&PerceptualPyramid>,
) -> Result<(f64, Vec<Tensor>)> {
    let coarse_outputs = coarse_middle_three(coarse, pair)?;
    let mask_img = well_exposed_mask(pair.reference(), pair.reference_role)?;
    let mask = Tensor::from_image(mask_img.weights());

    let mut tape = Tape::new();
    let pids = refine.params.leaves(&mut tape);
    let window = [
        tape.leaf(coarse_outputs[0].clone()),
        tape.leaf(coarse_outputs[1].clone()),
        tape.leaf(coarse_outputs[2].clone()),
    ];
    let graph = refine_forward_on_tape(
        &mut tape,
        refine,
        &pids,
        window,
        &mask,
        &RefineOverrides::default(),
    )?;
    let gt = tape.leaf(Tensor::from_image(pair.target.pixels()));
    let (loss, _) = refine_loss_on_tape(&mut tape, graph.merged, gt, &mask, perceptual);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss);
    Ok((value, refine.params.collect_grads(&mut grads, &pids)))
}

#[allow(clippy::type_complexity)]
fn finetune_sample_grads(
    coarse: &CoarseModel,
    refine: &RefineModel,
    pair: &LdrsHdrPair,
    perceptual: Option<&PerceptualPyramid>,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let c = pair.center_index();
    let mask_img = well_exposed_mask(pair.reference(), pair.reference_role)?;
    let mask = Tensor::from_image(mask_img.weights());

    let mut tape = Tape::new();
    let coarse_pids = coarse.params.leaves(&mut tape);
    let refine_pids = refine.params.leaves(&mut tape);

    let mut coarse_nodes = Vec::with_capacity(3);
    for j in [c - 1, c, c + 1] {
        let window = [
            pair.inputs.frames()[j - 1].clone(),
            pair.inputs.frames()[j].clone(),
            pair.inputs.frames()[j + 1].clone(),
        ];
        let graph = coarse_forward_on_tape(&mut tape, coarse, &coarse_pids, &window, None)?;
        coarse_nodes.push(graph.output);
    }

    let graph = refine_forward_on_tape(
        &mut tape,
        refine,
        &refine_pids,
        [coarse_nodes[0], coarse_nodes[1], coarse_nodes[2]],
        &mask,
        &RefineOverrides::default(),
    )?;
    let gt = tape.leaf(Tensor::from_image(pair.target.pixels()));
    let (loss, _) = refine_loss_on_tape(&mut tape, graph.merged, gt, &mask, perceptual);
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss);
    let coarse_grads = coarse.params.collect_grads(&mut grads, &coarse_pids);
    let refine_grads = refine.params.collect_grads(&mut grads, &refine_pids);
    Ok((value, coarse_grads, refine_grads))
}
