//! Write a synthetic dataset to disk: 16-bit PNG inputs, float EXR ground
//! truth and the manifest tying them together.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::RadianceFrame;
use crate::raster::ImageBuf;

use super::io::{write_hdr_exr, write_ldr_png, PngDepth};
use super::manifest::{DatasetManifest, PairEntry, SequenceEntry, SCHEMA_VERSION};
use super::{synthesize_sequence, ExposureSchedule};

/// Render each HDR clip under the schedule, write frames and per-frame
/// ground truth, and emit training pairs for every center with a valid
/// stride-1 window (plus the stride-2 twin where it fits). Returns the
/// manifest path.
///
/// With `normalize` set, each clip is scaled so its maximum radiance is 1.
pub fn export_dataset(
    clips: &[(String, Vec<RadianceFrame>)],
    schedule: &ExposureSchedule,
    out_dir: &Path,
    normalize: bool,
) -> Result<PathBuf> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to export".to_string()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e.to_string()))?;

    let period = schedule.period();
    let window = if period == 2 { 5usize } else { 7 };
    let half = window / 2;

    let mut manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        sequences: Vec::new(),
    };

    for (clip_id, frames) in clips {
        if frames.is_empty() {
            return Err(Error::invalid(format!("clip {clip_id} is empty")));
        }
        let seq_dir = out_dir.join(clip_id);
        std::fs::create_dir_all(&seq_dir).map_err(|e| Error::io(&seq_dir, e.to_string()))?;

        let scale = if normalize {
            let max = frames
                .iter()
                .map(|f| f.pixels().max())
                .fold(0.0f64, f64::max);
            if max > 0.0 {
                1.0 / max
            } else {
                1.0
            }
        } else {
            1.0
        };
        let scaled: Vec<RadianceFrame> = frames
            .iter()
            .map(|f| RadianceFrame::new(scale_buf(f.pixels(), scale)))
            .collect::<Result<Vec<_>>>()?;

        let sequence = synthesize_sequence(&scaled, schedule)?;

        let mut frame_paths = Vec::with_capacity(scaled.len());
        let mut exposures = Vec::with_capacity(scaled.len());
        let mut gt_paths = Vec::with_capacity(scaled.len());
        for (i, (frame, hdr)) in sequence.frames().iter().zip(&scaled).enumerate() {
            let rel_frame = format!("{clip_id}/frame_{i:04}.png");
            let rel_gt = format!("{clip_id}/gt_{i:04}.exr");
            write_ldr_png(&out_dir.join(&rel_frame), frame.pixels(), PngDepth::Sixteen)?;
            write_hdr_exr(&out_dir.join(&rel_gt), hdr.pixels())?;
            frame_paths.push(rel_frame);
            exposures.push(frame.exposure_t());
            gt_paths.push(Some(rel_gt));
        }

        let mut pairs = Vec::new();
        for (center, gt_path) in gt_paths.iter().enumerate() {
            for stride in [1usize, 2] {
                let reach = half * stride;
                if center >= reach && center + reach < scaled.len() {
                    pairs.push(PairEntry {
                        center,
                        stride,
                        gt: gt_path.clone().expect("gt written for every frame"),
                    });
                }
            }
        }

        manifest.sequences.push(SequenceEntry {
            id: clip_id.clone(),
            period,
            frames: frame_paths,
            exposures,
            pairs,
            gt_frames: gt_paths,
        });
    }

    manifest.validate()?;
    let manifest_path = out_dir.join("dataset.json");
    manifest.save(&manifest_path)?;
    Ok(manifest_path)
}

fn scale_buf(img: &ImageBuf, scale: f64) -> ImageBuf {
    if scale == 1.0 {
        img.clone()
    } else {
        img.map(|v| v * scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::synthetic_radiance_video;

    #[test]
    fn export_produces_loadable_manifest_and_pairs() {
        let dir = std::env::temp_dir().join(format!(
            "hdrvid-export-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos()
        ));
        let clips = vec![(
            "clip0".to_string(),
            synthetic_radiance_video(16, 16, 9, 4, 0.0, 0.0),
        )];
        let schedule = ExposureSchedule::new(vec![1.0, 4.0]).unwrap();
        let manifest_path = export_dataset(&clips, &schedule, &dir, false).unwrap();

        let manifest = DatasetManifest::load(&manifest_path).unwrap();
        assert_eq!(manifest.sequences.len(), 1);
        let seq = &manifest.sequences[0];
        assert_eq!(seq.frames.len(), 9);
        assert_eq!(seq.exposures[0], 1.0);
        assert_eq!(seq.exposures[1], 4.0);
        // Centers 2..=6 at stride 1 (5 windows) and 4 at stride 2 (1).
        let stride1 = seq.pairs.iter().filter(|p| p.stride == 1).count();
        let stride2 = seq.pairs.iter().filter(|p| p.stride == 2).count();
        assert_eq!(stride1, 5);
        assert_eq!(stride2, 1);

        let pairs = crate::harness::train::load_pairs(&manifest, &manifest_path).unwrap();
        assert_eq!(pairs.len(), 6);
        std::fs::remove_dir_all(dir).ok();
    }
}
