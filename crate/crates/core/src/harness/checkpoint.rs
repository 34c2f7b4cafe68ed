//! Checkpoint files: a JSON header (architecture configuration, schedule
//! period, training step) followed by raw little-endian f64 tensor payloads.
//! Loading restores parameters bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coarsenet::{CoarseConfig, CoarseModel};
use crate::error::{Error, Result};
use crate::refinenet::{RefineConfig, RefineModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HDRVCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMeta {
    /// Parameter group: "coarse" or "refine".
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Exposure schedule period the models were built for.
    pub period: usize,
    pub coarse_config: Option<CoarseConfig>,
    pub refine_config: Option<RefineConfig>,
    pub training_step: u64,
    pub stage: String,
    pub tensors: Vec<TensorMeta>,
}

/// In-memory checkpoint: header plus the named tensors per group.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub coarse: Vec<(String, Tensor)>,
    pub refine: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_models(
        coarse: Option<&CoarseModel>,
        refine: Option<&RefineModel>,
        period: usize,
        training_step: u64,
        stage: &str,
    ) -> Self {
        let mut tensors = Vec::new();
        let mut coarse_entries = Vec::new();
        let mut refine_entries = Vec::new();
        if let Some(model) = coarse {
            for (name, tensor) in model.params.iter() {
                tensors.push(TensorMeta {
                    group: "coarse".to_string(),
                    name: name.to_string(),
                    shape: tensor.shape().to_vec(),
                });
                coarse_entries.push((name.to_string(), tensor.clone()));
            }
        }
        if let Some(model) = refine {
            for (name, tensor) in model.params.iter() {
                tensors.push(TensorMeta {
                    group: "refine".to_string(),
                    name: name.to_string(),
                    shape: tensor.shape().to_vec(),
                });
                refine_entries.push((name.to_string(), tensor.clone()));
            }
        }
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                period,
                coarse_config: coarse.map(|m| m.config.clone()),
                refine_config: refine.map(|m| m.config.clone()),
                training_step,
                stage: stage.to_string(),
                tensors,
            },
            coarse: coarse_entries,
            refine: refine_entries,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header_json = serde_json::to_vec(&self.header)
            .map_err(|e| Error::data(format!("checkpoint header serialization: {e}")))?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e.to_string()))?;
        let io_err = |e: std::io::Error| Error::io(path, e.to_string());
        file.write_all(MAGIC).map_err(io_err)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io_err)?;
        file.write_all(&header_json).map_err(io_err)?;
        for meta in &self.header.tensors {
            let entries = if meta.group == "coarse" {
                &self.coarse
            } else {
                &self.refine
            };
            let tensor = &entries
                .iter()
                .find(|(n, _)| n == &meta.name)
                .expect("header lists only stored tensors")
                .1;
            let mut bytes = Vec::with_capacity(tensor.numel() * 8);
            for v in tensor.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            file.write_all(&bytes).map_err(io_err)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e.to_string()))?;
        let io_err = |e: std::io::Error| Error::io(path, e.to_string());

        let mut magic = [0u8; 8];
        file.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(Error::data(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(io_err)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json).map_err(io_err)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)
            .map_err(|e| Error::data(format!("checkpoint header parse: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }

        let mut coarse = Vec::new();
        let mut refine = Vec::new();
        for meta in &header.tensors {
            let numel: usize = meta.shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            file.read_exact(&mut bytes).map_err(io_err)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(meta.shape.clone(), data);
            match meta.group.as_str() {
                "coarse" => coarse.push((meta.name.clone(), tensor)),
                "refine" => refine.push((meta.name.clone(), tensor)),
                other => {
                    return Err(Error::data(format!(
                        "unknown checkpoint tensor group {other}"
                    )))
                }
            }
        }
        Ok(Checkpoint {
            header,
            coarse,
            refine,
        })
    }

    /// Rebuild the coarse model stored in this checkpoint.
    pub fn build_coarse(&self) -> Result<CoarseModel> {
        let config = self
            .header
            .coarse_config
            .clone()
            .ok_or_else(|| Error::config("checkpoint holds no coarse model".to_string()))?;
        let mut model = CoarseModel::new(config, self.header.period, 0)?;
        model.params.load_named(&self.coarse)?;
        Ok(model)
    }

    /// Rebuild the refine model stored in this checkpoint.
    pub fn build_refine(&self) -> Result<RefineModel> {
        let config = self
            .header
            .refine_config
            .clone()
            .ok_or_else(|| Error::config("checkpoint holds no refine model".to_string()))?;
        let mut model = RefineModel::new(config, 0)?;
        model.params.load_named(&self.refine)?;
        Ok(model)
    }
}
