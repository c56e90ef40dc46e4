//! Versioned checkpoint container.
//!
//! Layout: magic `MMEVCKPT`, u32 LE format version, u64 LE header length, a
//! JSON header, then raw f64 LE values: every model tensor in visit order,
//! followed by the AdamW first and second moments when present.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::data_model::LabelSpace;
use crate::error::{Error, Result};
use crate::heads::FusionSetting;
use crate::model::{group_of, Model, ModelConfig};
use crate::tensor::Params;

const MAGIC: &[u8; 8] = b"MMEVCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    /// Substage names that produced this state, oldest first.
    pub lineage: Vec<String>,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    lineage: Vec<String>,
    config_hash: String,
    metrics: BTreeMap<String, f64>,
    labels: LabelSpace,
    model_config: ModelConfig,
    setting: FusionSetting,
    text_base_dim: usize,
    image_base_dim: usize,
    tensors: Vec<TensorEntry>,
    optimizer_steps: Option<Vec<u64>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<u8> = Vec::new();
        self.model.visit("", &mut |name, x| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                group: group_of(name),
                len: x.len(),
            });
            for v in x {
                data.extend_from_slice(&v.to_le_bytes());
            }
        });
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                for v in t {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            lineage: self.lineage.clone(),
            config_hash: self.config_hash.clone(),
            metrics: self.metrics.clone(),
            labels: self.model.labels.clone(),
            model_config: self.model.config.clone(),
            setting: self.model.fusion.setting,
            text_base_dim: self.model.text_encoder.proj.input_dim(),
            image_base_dim: self.model.image_encoder.proj.input_dim(),
            tensors,
            optimizer_steps: self.optimizer.as_ref().map(|o| o.steps.clone()),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + header.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hend = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        let values: Vec<f64> = bytes[hend..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let mut model = Model::new(
            header.model_config.clone(),
            header.labels.clone(),
            header.text_base_dim,
            header.image_base_dim,
            header.setting,
            0,
        )?;
        let total: usize = header.tensors.iter().map(|t| t.len).sum();
        let with_opt = header.optimizer_steps.is_some();
        let expected = if with_opt { 3 * total } else { total };
        if values.len() != expected {
            return Err(bad(format!("expected {expected} values, found {}", values.len())));
        }
        let mut i = 0;
        let mut offset = 0;
        let mut err = None;
        model.visit_mut("", &mut |name, x| {
            match header.tensors.get(i) {
                Some(t) if t.name == name && t.len == x.len() => {
                    x.copy_from_slice(&values[offset..offset + t.len]);
                    offset += t.len;
                }
                _ => {
                    err = err
                        .take()
                        .or(Some(format!("tensor {i} (`{name}`) does not match the header")))
                }
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(bad(e));
        }
        let optimizer = header.optimizer_steps.map(|steps| {
            let split = |base: usize| {
                let mut out = Vec::with_capacity(header.tensors.len());
                let mut o = base;
                for t in &header.tensors {
                    out.push(values[o..o + t.len].to_vec());
                    o += t.len;
                }
                out
            };
            AdamState {
                m: split(total),
                v: split(2 * total),
                steps,
            }
        });
        Ok(Self {
            model,
            optimizer,
            lineage: header.lineage,
            config_hash: header.config_hash,
            metrics: header.metrics,
        })
    }

    /// Writes atomically; refuses to overwrite an existing checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if path.exists() {
            return Err(Error::Checkpoint(format!("{} already exists", path.display())));
        }
        let dir = path.parent().unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?;
        crate::augmentation::cache::atomic_write(dir, &name.to_string_lossy(), &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
