//! Binary checkpoint format.
//!
//! ```text
//! magic "SEQSEGCK" | u64 LE header length | JSON header | f32 LE tensor data
//! ```
//!
//! Parameters are computed in f64 and stored as f32.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_bytes, write_bytes};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"SEQSEGCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Free-form training metadata (variant, selector, epoch, ...).
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn from_model(model: &Model, metadata: serde_json::Value) -> Self {
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            metadata,
        }
    }

    pub fn into_model(self) -> Model {
        Model::from_params(self.config, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<f32> = Vec::with_capacity(self.params.num_params());
        for (name, layer) in self.params.layers() {
            tensors.push(TensorEntry {
                name: format!("{name}.weight"),
                shape: layer.weight.shape().to_vec(),
                offset: data.len(),
            });
            data.extend(layer.weight.iter().map(|&v| v as f32));
            tensors.push(TensorEntry {
                name: format!("{name}.bias"),
                shape: layer.bias.shape().to_vec(),
                offset: data.len(),
            });
            data.extend(layer.bias.iter().map(|&v| v as f32));
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses checkpoint bytes; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format_version)));
        }
        header.config.validate().map_err(|e| bad(e.to_string()))?;
        let raw = &bytes[data_start..];
        if raw.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values".into()));
        }
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut params = ModelParams::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0)).zeros_like();
        let mut expected = Vec::new();
        for (name, layer) in params.layers() {
            expected.push((format!("{name}.weight"), layer.weight.shape().to_vec()));
            expected.push((format!("{name}.bias"), layer.bias.shape().to_vec()));
        }
        if expected.len() != header.tensors.len() {
            return Err(bad(format!(
                "expected {} tensors for this configuration, found {}",
                expected.len(),
                header.tensors.len()
            )));
        }
        let mut used = 0usize;
        for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
            if &entry.name != name || &entry.shape != shape {
                return Err(bad(format!(
                    "tensor {} {:?} does not match the configuration ({name} {shape:?})",
                    entry.name, entry.shape
                )));
            }
            used = used.max(entry.offset + shape.iter().product::<usize>());
        }
        if used != data.len() {
            return Err(bad(format!("data section holds {} values, expected {used}", data.len())));
        }
        let take = |entry: &TensorEntry| -> Result<Vec<f64>> {
            let len: usize = entry.shape.iter().product();
            let slice = data
                .get(entry.offset..entry.offset + len)
                .ok_or_else(|| bad(format!("tensor {} out of bounds", entry.name)))?;
            Ok(slice.iter().map(|&v| v as f64).collect())
        };
        for (i, (_, layer)) in params.layers_mut().into_iter().enumerate() {
            let w = take(&header.tensors[2 * i])?;
            let b = take(&header.tensors[2 * i + 1])?;
            layer.weight.iter_mut().zip(w).for_each(|(d, s)| *d = s);
            layer.bias.iter_mut().zip(b).for_each(|(d, s)| *d = s);
        }
        if !params.is_finite() {
            return Err(bad("non-finite parameter values".into()));
        }
        Ok(Self {
            config: header.config,
            params,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }

    /// Loads and checks that the stored configuration equals `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.config != expected {
            return Err(Error::format(
                path,
                format!("checkpoint config {:?} does not match {:?}", ckpt.config, expected),
            ));
        }
        Ok(ckpt)
    }
}
