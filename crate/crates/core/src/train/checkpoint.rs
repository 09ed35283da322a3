//! `RPNC0001` checkpoints: magic, u32 LE header length, JSON header, then
//! the tensors as contiguous little-endian f32.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Scene, SceneFile};
use crate::model::{Model, ModelConfig};
use crate::sh::SH_CONVENTION;
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RPNC0001";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub train_config_digest: String,
    pub sh_convention: String,
    #[serde(rename = "P_min_db")]
    pub p_min_db: f64,
    #[serde(rename = "P_max_db")]
    pub p_max_db: f64,
    pub scene_hash: String,
    /// The training scene, so a checkpoint is usable without its dataset.
    pub scene: SceneFile,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(model: Model, train_config_digest: String, p_bounds_db: (f64, f64), scene: &Scene) -> Self {
        let mut offset = 0;
        let tensors = model
            .params
            .iter()
            .map(|(_, name, t)| {
                let e = TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into(), offset };
                offset += 4 * t.len();
                e
            })
            .collect();
        let header = CheckpointHeader {
            model_config: model.config.clone(),
            train_config_digest,
            sh_convention: SH_CONVENTION.to_string(),
            p_min_db: p_bounds_db.0,
            p_max_db: p_bounds_db.1,
            scene_hash: scene.hash(),
            scene: scene.to_file(),
            tensors,
        };
        Self { header, model }
    }

    pub fn scene(&self) -> Result<Scene> {
        Scene::from_file(self.header.scene.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + 4 * self.model.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in self.model.params.iter() {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::format("truncated checkpoint header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.sh_convention != SH_CONVENTION {
        return Err(Error::format(format!("unsupported SH convention {:?}", header.sh_convention)));
    }
    let payload = &bytes[12 + len..];
    let mut store = ParamStore::new();
    let mut expected_offset = 0;
    for e in &header.tensors {
        if e.dtype != "f32" {
            return Err(Error::format(format!("tensor {} has dtype {}", e.name, e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        if e.offset != expected_offset {
            return Err(Error::format(format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset)));
        }
        let raw = payload
            .get(e.offset..e.offset + 4 * count)
            .ok_or_else(|| Error::format(format!("truncated payload in tensor {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        expected_offset += 4 * count;
    }
    if payload.len() != expected_offset {
        return Err(Error::format(format!(
            "checkpoint payload has {} bytes, tensors cover {expected_offset}",
            payload.len()
        )));
    }
    let model = Model::from_params(header.model_config.clone(), store)?;
    Scene::from_file(header.scene.clone())?;
    Ok(Checkpoint { header, model })
}
