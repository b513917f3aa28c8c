//! The NPCK checkpoint container.
//!
//! Layout: magic `NPCK`, version (u32 LE), header length (u32 LE), a UTF-8
//! JSON header, then the raw little-endian `f32` arrays. Array offsets in the
//! header are byte offsets from the start of the data section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::{GateConstants, MaskSet};
use crate::model::{weight_specs, Granularity, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NPCK";
pub const VERSION: u32 = 1;

const GATE_CONSTANTS_KEY: &str = "gate_constants";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    #[serde(default)]
    metadata: BTreeMap<String, serde_json::Value>,
    arrays: Vec<ArrayEntry>,
}

/// Named `f32` arrays plus the model config and free-form metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn mask_array_name(g: Granularity, layer: usize) -> String {
    format!("mask/{}/{layer}", g.name())
}

impl Checkpoint {
    pub fn new(config: ModelConfig) -> Self {
        Self { config, metadata: BTreeMap::new(), arrays: Vec::new() }
    }

    pub fn from_model(model: &Model) -> Self {
        let mut ck = Self::new(*model.config());
        ck.arrays = model.named_weights().map(|(n, t)| (n, t.clone())).collect();
        ck
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds or replaces an array.
    pub fn insert(&mut self, name: String, tensor: Tensor<f32>) {
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.arrays.push((name, tensor)),
        }
    }

    pub fn has_model(&self) -> bool {
        self.get("embed/token").is_some()
    }

    pub fn model(&self) -> Result<Model> {
        let weights = weight_specs(&self.config)
            .into_iter()
            .map(|(name, _)| self.get(&name).cloned().ok_or_else(|| bad(format!("missing array {name}"))))
            .collect::<Result<Vec<_>>>()?;
        Model::from_weights(self.config, weights)
    }

    /// Stores `masks` as `mask/<granularity>/<layer>` arrays.
    pub fn put_masks(&mut self, masks: &MaskSet) -> Result<()> {
        if masks.config() != &self.config {
            return Err(bad("mask set config differs from checkpoint config"));
        }
        for l in 0..self.config.n_layers {
            for g in Granularity::ALL {
                self.insert(mask_array_name(g, l), Tensor::vector(masks.family(l, g).to_vec()));
            }
        }
        self.metadata.insert(GATE_CONSTANTS_KEY.into(), serde_json::to_value(masks.constants)?);
        Ok(())
    }

    pub fn has_masks(&self) -> bool {
        self.get(&mask_array_name(Granularity::AttnBlock, 0)).is_some()
    }

    pub fn masks(&self) -> Result<MaskSet> {
        let constants: GateConstants = match self.metadata.get(GATE_CONSTANTS_KEY) {
            Some(v) => serde_json::from_value(v.clone())?,
            None => GateConstants::default(),
        };
        let mut masks = MaskSet::new(&self.config, constants);
        for l in 0..self.config.n_layers {
            for g in Granularity::ALL {
                let name = mask_array_name(g, l);
                let t = self.get(&name).ok_or_else(|| bad(format!("missing array {name}")))?;
                let slot = masks.family_mut(l, g);
                if t.numel() != slot.len() {
                    return Err(bad(format!("array {name} has {} values, expected {}", t.numel(), slot.len())));
                }
                slot.copy_from_slice(t.data());
            }
        }
        MaskSet::from_values(&self.config, constants, masks.log_alpha)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let arrays = self
            .arrays
            .iter()
            .map(|(name, t)| {
                let e = ArrayEntry { name: name.clone(), shape: t.shape().to_vec(), offset };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let header = Header { config: self.config, metadata: self.metadata.clone(), arrays };
        let json = serde_json::to_vec(&header)?;
        let header_len = u32::try_from(json.len()).map_err(|_| bad("header too large"))?;
        let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("not an NPCK file"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = word(8) as usize;
        let data_start = 12 + header_len;
        if bytes.len() < data_start {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&bytes[12..data_start])?;
        let data = &bytes[data_start..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let start = usize::try_from(e.offset).map_err(|_| bad("offset overflow"))?;
            let end = start.checked_add(4 * n).filter(|&end| end <= data.len());
            let Some(end) = end else {
                return Err(bad(format!("array {} exceeds data section", e.name)));
            };
            let values = data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((e.name, Tensor::new(e.shape, values)?));
        }
        Ok(Self { config: header.config, metadata: header.metadata, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
