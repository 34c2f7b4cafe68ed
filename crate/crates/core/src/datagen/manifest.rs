//! Dataset manifest: one JSON document per dataset listing its sequences,
//! per-frame relative paths, exposure values, schedule period and
//! training-pair definitions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub sequences: Vec<SequenceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    /// Exposure schedule period (2 or 3).
    pub period: usize,
    /// Relative paths of the LDR frames, in temporal order.
    pub frames: Vec<String>,
    /// Relative exposure per frame, aligned with `frames`.
    pub exposures: Vec<f64>,
    /// Training pairs defined over this sequence.
    #[serde(default)]
    pub pairs: Vec<PairEntry>,
    /// Ground-truth HDR per frame, when available (aligned with `frames`).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gt_frames: Vec<Option<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairEntry {
    /// Index of the reference frame in this sequence.
    pub center: usize,
    /// Neighbor sampling stride (1 or 2).
    pub stride: usize,
    /// Relative path of the ground-truth HDR for the center frame.
    pub gt: String,
}

impl DatasetManifest {
    pub fn new() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            sequences: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::data(format!(
                "unsupported manifest schema version {}",
                self.schema_version
            )));
        }
        for seq in &self.sequences {
            if seq.period != 2 && seq.period != 3 {
                return Err(Error::data(format!(
                    "sequence {}: period must be 2 or 3",
                    seq.id
                )));
            }
            if seq.frames.len() != seq.exposures.len() {
                return Err(Error::data(format!(
                    "sequence {}: {} frames but {} exposures",
                    seq.id,
                    seq.frames.len(),
                    seq.exposures.len()
                )));
            }
            if seq.exposures.iter().any(|&t| t <= 0.0 || !t.is_finite()) {
                return Err(Error::data(format!(
                    "sequence {}: exposures must be positive",
                    seq.id
                )));
            }
            if !seq.gt_frames.is_empty() && seq.gt_frames.len() != seq.frames.len() {
                return Err(Error::data(format!(
                    "sequence {}: gt_frames must align with frames",
                    seq.id
                )));
            }
            for pair in &seq.pairs {
                if pair.center >= seq.frames.len() {
                    return Err(Error::data(format!(
                        "sequence {}: pair center {} out of range",
                        seq.id, pair.center
                    )));
                }
                if pair.stride == 0 {
                    return Err(Error::data(format!(
                        "sequence {}: pair stride must be positive",
                        seq.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::data(format!("manifest serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e.to_string()))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("manifest parse error in {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self::new()
    }
}

/// Resolve a manifest-relative path against the manifest's directory.
pub fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(relative)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_validation() {
        let manifest = DatasetManifest {
            schema_version: SCHEMA_VERSION,
            sequences: vec![SequenceEntry {
                id: "seq0".to_string(),
                period: 2,
                frames: vec!["seq0/f0.png".into(), "seq0/f1.png".into()],
                exposures: vec![1.0, 4.0],
                pairs: vec![],
                gt_frames: vec![],
            }],
        };
        manifest.validate().unwrap();

        let dir = std::env::temp_dir().join(format!("hdrvid-manifest-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dataset.json");
        manifest.save(&path).unwrap();
        let back = DatasetManifest::load(&path).unwrap();
        assert_eq!(back.sequences[0].exposures, vec![1.0, 4.0]);
        assert_eq!(resolve(&path, "seq0/f0.png"), dir.join("seq0/f0.png"));
        std::fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn bad_manifests_are_rejected() {
        let mut manifest = DatasetManifest::new();
        manifest.sequences.push(SequenceEntry {
            id: "x".into(),
            period: 4,
            frames: vec![],
            exposures: vec![],
            pairs: vec![],
            gt_frames: vec![],
        });
        assert!(manifest.validate().is_err());

        manifest.sequences[0].period = 2;
        manifest.sequences[0].exposures = vec![1.0];
        assert!(manifest.validate().is_err());
    }
}
