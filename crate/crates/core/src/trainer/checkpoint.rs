//! Checkpoint container:
//!
//! ```text
//! magic "HRALCKPT" | header_len: u64 LE | JSON header | tensor records
//! ```
//!
//! The header lists every tensor by name with its shape and byte offset into
//! the record section; records use the plain tensor wire format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Method, TrainConfig};
use super::model::AlignModel;
use crate::adapter::{AdapterBlock, AdapterStack, SiteAdapter};
use crate::dataset::manifest::write_atomic;
use crate::encoder::{Backbone, ConvBlock};
use crate::error::{Error, Result};
use crate::task_query::QueryEmbedder;
use crate::tensor::{tensor_from_bytes, tensor_to_bytes, AdamConfig, AdamState, RngState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HRALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
    slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    method: Option<Method>,
    config: Option<TrainConfig>,
    config_hash: String,
    step: u64,
    rng: RngState,
    backbone_strides: Vec<usize>,
    backbone_padding: Vec<usize>,
    adam: Option<AdamHeader>,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the run state needed to resume.
#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub version: u32,
    /// `None` for a bare pre-trained backbone.
    pub method: Option<Method>,
    pub config: Option<TrainConfig>,
    pub config_hash: String,
    pub step: u64,
    pub rng: RngState,
    pub backbone_strides: Vec<usize>,
    pub backbone_padding: Vec<usize>,
    pub adam: Option<AdamState>,
    /// Ordered `(name, tensor)` list; backbone, adapters, query, head.
    pub tensors: Vec<(String, Tensor)>,
}

fn backbone_tensors(backbone: &Backbone) -> Vec<(String, Tensor)> {
    backbone
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(i, b)| {
            [
                (format!("backbone.{i}.weight"), b.weight.detach()),
                (format!("backbone.{i}.bias"), b.bias.detach()),
            ]
        })
        .collect()
}

fn stack_tensors(stack: &AdapterStack) -> Vec<(String, Tensor)> {
    stack
        .adapters
        .iter()
        .flat_map(|a| {
            let s = a.site;
            let b = &a.block;
            [
                (format!("adapter.{s}.down_weight"), b.down_weight.detach()),
                (format!("adapter.{s}.down_bias"), b.down_bias.detach()),
                (format!("adapter.{s}.up_weight"), b.up_weight.detach()),
                (format!("adapter.{s}.up_bias"), b.up_bias.detach()),
            ]
        })
        .collect()
}

impl ModelCheckpoint {
    pub fn for_backbone(backbone: &Backbone, rng: RngState) -> Self {
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            method: None,
            config: None,
            config_hash: String::new(),
            step: 0,
            rng,
            backbone_strides: backbone.blocks.iter().map(|b| b.stride).collect(),
            backbone_padding: backbone.blocks.iter().map(|b| b.padding).collect(),
            adam: None,
            tensors: backbone_tensors(backbone),
        }
    }

    /// Snapshot of a model. The query projection is always stored, even when
    /// it was not trained, so every checkpoint can be evaluated.
    pub fn capture(model: &AlignModel, cfg: &TrainConfig, step: u64, rng: RngState, adam: Option<&AdamState>) -> Self {
        let mut ck = Self::for_backbone(&model.backbone, rng);
        ck.method = Some(cfg.method);
        ck.config = Some(cfg.clone());
        ck.config_hash = cfg.hash();
        ck.step = step;
        ck.adam = adam.cloned();
        ck.tensors.extend(stack_tensors(&model.stack));
        ck.tensors.push(("query.projection".into(), model.query.projection.detach()));
        ck.tensors.push(("query.bias".into(), model.query.bias.detach()));
        ck
    }

    pub fn push(&mut self, name: &str, t: &Tensor) {
        self.tensors.push((name.to_string(), t.detach()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn require(&self, name: &str) -> Result<Tensor> {
        self.tensor(name)
            .map(Tensor::detach)
            .ok_or_else(|| Error::Load {
                entry: name.to_string(),
                reason: "tensor missing from checkpoint".into(),
            })
    }

    /// Rebuilt frozen backbone.
    pub fn backbone(&self) -> Result<Backbone> {
        let blocks = (0..self.backbone_strides.len())
            .map(|i| {
                Ok(ConvBlock {
                    weight: self.require(&format!("backbone.{i}.weight"))?,
                    bias: self.require(&format!("backbone.{i}.bias"))?,
                    stride: self.backbone_strides[i],
                    padding: self.backbone_padding[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if blocks.is_empty() {
            return Err(Error::Load {
                entry: "backbone".into(),
                reason: "checkpoint has no backbone blocks".into(),
            });
        }
        Ok(Backbone::from_blocks(blocks, true))
    }

    pub fn stack(&self, backbone: &Backbone) -> Result<AdapterStack> {
        let Some(cfg) = &self.config else {
            return Ok(AdapterStack::empty());
        };
        let uses_adapters = cfg.method == Method::HrAlign || cfg.baseline_adapter;
        if !uses_adapters {
            return Ok(AdapterStack::empty());
        }
        let adapters = cfg
            .adapter_positions
            .sites(backbone.blocks.len())
            .into_iter()
            .map(|(position, site)| {
                let g = |part: &str| self.require(&format!("adapter.{site}.{part}")).map(Tensor::into_param);
                Ok(SiteAdapter {
                    position,
                    site,
                    block: AdapterBlock {
                        down_weight: g("down_weight")?,
                        down_bias: g("down_bias")?,
                        up_weight: g("up_weight")?,
                        up_bias: g("up_bias")?,
                        ratio: cfg.adapter_ratio,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stack = AdapterStack {
            positions: cfg.adapter_positions.clone(),
            adapters,
        };
        stack.validate(backbone)?;
        Ok(stack)
    }

    /// The evaluable model stored in this checkpoint. Baselines evaluate with
    /// uniform pooling because they never trained a query.
    pub fn model(&self) -> Result<AlignModel> {
        let backbone = self.backbone()?;
        let stack = self.stack(&backbone)?;
        let cfg = self.config.clone().unwrap_or_default();
        let query = match (self.tensor("query.projection"), self.tensor("query.bias")) {
            (Some(p), Some(b)) => QueryEmbedder::from_weights(p.clone(), b.clone())?,
            _ => QueryEmbedder::new(backbone.out_channels(), &mut RngState::new(0)),
        };
        let use_language = self.method == Some(Method::HrAlign) && cfg.use_language;
        Ok(AlignModel {
            backbone,
            stack,
            query,
            use_language,
            normalize: cfg.normalize,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut entries = Vec::new();
        let mut all: Vec<(String, Tensor)> = self.tensors.clone();
        if let Some(adam) = &self.adam {
            for (i, (m, v)) in adam.first.iter().zip(&adam.second).enumerate() {
                all.push((format!("adam.m.{i}"), Tensor::from_vec(&[m.len()], m.clone())?));
                all.push((format!("adam.v.{i}"), Tensor::from_vec(&[v.len()], v.clone())?));
            }
        }
        for (name, t) in &all {
            let bytes = tensor_to_bytes(t);
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: blobs.len(),
                bytes: bytes.len(),
            });
            blobs.extend(bytes);
        }
        let header = Header {
            version: self.version,
            method: self.method,
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            step: self.step,
            rng: self.rng,
            backbone_strides: self.backbone_strides.clone(),
            backbone_padding: self.backbone_padding.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step,
                slots: a.first.len(),
            }),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + blobs.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let err = |reason: String| Error::Load {
            entry: origin.to_string(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| err(format!("malformed header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported checkpoint version {}", header.version)));
        }
        let body = &bytes[body_start..];
        let mut tensors = Vec::new();
        let mut moments: Vec<(String, Vec<f64>)> = Vec::new();
        for e in &header.tensors {
            let slice = body
                .get(e.offset..e.offset + e.bytes)
                .ok_or_else(|| err(format!("tensor {} runs past the end of the file", e.name)))?;
            let (t, used) = tensor_from_bytes(slice).map_err(|x| err(format!("tensor {}: {x}", e.name)))?;
            if used != e.bytes || t.shape() != e.shape.as_slice() {
                return Err(err(format!("tensor {} does not match its header entry", e.name)));
            }
            if e.name.starts_with("adam.") {
                moments.push((e.name.clone(), t.to_vec()));
            } else {
                tensors.push((e.name.clone(), t));
            }
        }
        let adam = match header.adam {
            None => None,
            Some(h) => {
                let take = |kind: &str, i: usize| {
                    moments
                        .iter()
                        .find(|(n, _)| *n == format!("adam.{kind}.{i}"))
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| err(format!("optimizer slot adam.{kind}.{i} missing")))
                };
                Some(AdamState {
                    config: h.config,
                    step: h.step,
                    first: (0..h.slots).map(|i| take("m", i)).collect::<Result<_>>()?,
                    second: (0..h.slots).map(|i| take("v", i)).collect::<Result<_>>()?,
                })
            }
        };
        if let Some(cfg) = &header.config {
            if cfg.hash() != header.config_hash {
                return Err(err("config hash does not match the stored config".into()));
            }
        }
        Ok(ModelCheckpoint {
            version: header.version,
            method: header.method,
            config: header.config,
            config_hash: header.config_hash,
            step: header.step,
            rng: header.rng,
            backbone_strides: header.backbone_strides,
            backbone_padding: header.backbone_padding,
            adam,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Bitwise equality of every stored value.
    pub fn same_contents(&self, other: &ModelCheckpoint) -> bool {
        match (self.to_bytes(), other.to_bytes()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::BackboneSpec;

    fn model() -> (AlignModel, TrainConfig) {
        let mut rng = RngState::new(4);
        let bb = Backbone::new(&BackboneSpec::default(), &mut rng).unwrap().frozen();
        let cfg = TrainConfig {
            adapter_positions: "EML".parse().unwrap(),
            ..Default::default()
        };
        (AlignModel::init(&bb, &cfg, &mut rng).unwrap(), cfg)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (m, cfg) = model();
        let params = m.learnable();
        let mut adam = AdamState::new(AdamConfig::default(), &params);
        adam.first[0][0] = 0.25;
        adam.step = 3;
        let ck = ModelCheckpoint::capture(&m, &cfg, 3, RngState::new(9), Some(&adam));
        let bytes = ck.to_bytes().unwrap();
        let back = ModelCheckpoint::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.adam.as_ref().unwrap(), &adam);
        let rebuilt = back.model().unwrap();
        assert_eq!(rebuilt.stack.parameter_count(), m.stack.parameter_count());
        assert!(rebuilt.backbone.is_frozen());
    }

    #[test]
    fn corrupt_inputs_are_load_errors() {
        let (m, cfg) = model();
        let bytes = ModelCheckpoint::capture(&m, &cfg, 0, RngState::new(1), None).to_bytes().unwrap();
        assert!(matches!(ModelCheckpoint::from_bytes(b"nope", "x"), Err(Error::Load { .. })));
        assert!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3], "x").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ModelCheckpoint::from_bytes(&bad, "x").is_err());
    }

    #[test]
    fn missing_tensor_is_named() {
        let (m, cfg) = model();
        let mut ck = ModelCheckpoint::capture(&m, &cfg, 0, RngState::new(1), None);
        ck.tensors.retain(|(n, _)| n != "adapter.3.up_bias");
        let err = ck.model().unwrap_err().to_string();
        assert!(err.contains("adapter.3.up_bias"), "{err}");
    }
}
