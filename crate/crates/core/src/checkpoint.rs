//! Named-tensor container and model checkpoints.
//!
//! ```text
//! 0..4    magic  b"SFCK"
//! 4..8    u32    container version
//! 8..16   u64    header length H
//! 16..16+H       JSON header: metadata + tensor table (name, dtype, shape, byte offset)
//! ...            tensor data, little-endian, in table order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{Model, ModelConfig};

pub const CONTAINER_MAGIC: &[u8; 4] = b"SFCK";
pub const CONTAINER_VERSION: u32 = 1;
pub const CHECKPOINT_FORMAT: &str = "stemflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Shape(format!("tensor {} does not match its shape", t.name)));
            }
            entries.push(TensorEntry {
                name: t.name.clone(),
                dtype: t.dtype,
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.len() * t.dtype.width();
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(CONTAINER_MAGIC);
        out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            match t.dtype {
                DType::F32 => t.data.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
                DType::F64 => t.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CONTAINER_MAGIC {
            return Err(Error::Format("missing tensor container header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated container header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start])?;
        let body = &bytes[body_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let w = e.dtype.width();
            let raw = body
                .get(e.offset..e.offset + n * w)
                .ok_or_else(|| Error::Format(format!("tensor {} runs past the end", e.name)))?;
            let data = match e.dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            tensors.push(NamedTensor {
                name: e.name,
                dtype: e.dtype,
                shape: e.shape,
                data,
            });
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub model_config: ModelConfig,
    pub step: u64,
    pub setting: Option<String>,
}

/// Trained weights as stored on disk: 32-bit floats plus the model config.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub config: ModelConfig,
    /// Values are exactly representable as `f32`, so a saved and reloaded
    /// bundle is identical to the in-memory one.
    pub params: Vec<f64>,
    pub step: u64,
    pub setting: Option<String>,
}

impl CheckpointBundle {
    pub fn from_model(model: &Model, step: u64, setting: Option<String>) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.iter().map(|p| *p as f32 as f64).collect(),
            step,
            setting,
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let model = self.model()?;
        let meta = CheckpointMeta {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model_config: self.config.clone(),
            step: self.step,
            setting: self.setting.clone(),
        };
        Ok(TensorFile {
            metadata: serde_json::to_value(meta)?,
            tensors: model
                .layout
                .tensors
                .iter()
                .map(|info| NamedTensor {
                    name: info.name.clone(),
                    dtype: DType::F32,
                    shape: info.shape.clone(),
                    data: model.params[info.range()].to_vec(),
                })
                .collect(),
        })
    }

    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(file.metadata.clone())?;
        if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "not a version-{CHECKPOINT_VERSION} checkpoint: {} v{}",
                meta.format, meta.version
            )));
        }
        let mut model = Model::init(meta.model_config.clone())?;
        for info in model.layout.tensors.clone() {
            let t = file
                .get(&info.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", info.name)))?;
            if t.shape != info.shape {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    info.name, t.shape, info.shape
                )));
            }
            model.params[info.range()].copy_from_slice(&t.data);
        }
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteInput("checkpoint parameters".into()));
        }
        Ok(Self {
            config: meta.model_config,
            params: model.params,
            step: meta.step,
            setting: meta.setting,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_tensor_file()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
