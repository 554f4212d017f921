//! Versioned parameter container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! (specs, step, free-form metadata, tensor table), then every tensor's
//! values as little-endian `f64` in table order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{DiscSpec, EncoderSpec, Model, NetError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCDACKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array1(a: &Array1<f64>) -> Self {
        Self {
            shape: vec![a.len()],
            data: a.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub num_classes: usize,
    pub encoder: EncoderSpec,
    pub disc: DiscSpec,
    pub step: u64,
    pub metadata: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    num_classes: usize,
    encoder: EncoderSpec,
    disc: DiscSpec,
    step: u64,
    metadata: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let header = Header {
            num_classes: self.num_classes,
            encoder: self.encoder,
            disc: self.disc.clone(),
            step: self.step,
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(k, t)| (k.clone(), t.shape.clone())).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let total: usize = self.tensors.values().map(|t| t.data.len()).sum();
        let mut buf = Vec::with_capacity(20 + json.len() + 8 * total);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let io = |source| NetError::Io {
            path: path.to_path_buf(),
            source,
        };
        // write-then-rename so a crash never leaves a truncated checkpoint behind
        let tmp = path.with_extension("ckpt.partial");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let bytes = fs::read(path).map_err(|source| NetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| NetError::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let mut offset = 20 + len;
        let mut tensors = BTreeMap::new();
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(format!("truncated data for tensor {name}")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            offset += 8 * n;
            tensors.insert(name, Tensor { shape, data });
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            num_classes: header.num_classes,
            encoder: header.encoder,
            disc: header.disc,
            step: header.step,
            metadata: header.metadata,
            tensors,
        })
    }
}

impl Model {
    pub fn to_checkpoint(&self, step: u64, metadata: serde_json::Value) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (path, layer) in self.es_layers().into_iter().chain(self.d_layers()) {
            tensors.insert(format!("{path}.weight"), Tensor::from_array2(&layer.weight));
            tensors.insert(format!("{path}.bias"), Tensor::from_array1(&layer.bias));
        }
        Checkpoint {
            num_classes: self.num_classes(),
            encoder: *self.encoder.spec(),
            disc: self.disc.spec().clone(),
            step,
            metadata,
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, NetError> {
        let mut model = Model::new(ckpt.num_classes, ckpt.encoder, ckpt.disc.clone(), 0)?;
        model.load_parameters(ckpt)?;
        Ok(model)
    }

    /// Copies parameters from `ckpt`, rejecting any spec or shape disagreement.
    pub fn load_parameters(&mut self, ckpt: &Checkpoint) -> Result<(), NetError> {
        if ckpt.num_classes != self.num_classes() {
            return Err(NetError::SpecMismatch(format!(
                "num_classes {} vs {}",
                ckpt.num_classes,
                self.num_classes()
            )));
        }
        if &ckpt.encoder != self.encoder.spec() {
            return Err(NetError::SpecMismatch(format!("encoder {:?} vs {:?}", ckpt.encoder, self.encoder.spec())));
        }
        if &ckpt.disc != self.disc.spec() {
            return Err(NetError::SpecMismatch(format!("discriminator {:?} vs {:?}", ckpt.disc, self.disc.spec())));
        }
        let names: Vec<String> = self.es_layers().into_iter().chain(self.d_layers()).map(|(p, _)| p).collect();
        let Model { encoder, seg_head, disc } = self;
        let layers = encoder
            .layers_mut()
            .iter_mut()
            .chain(std::iter::once(seg_head.conv_mut()))
            .chain(disc.layers_mut());
        for (path, layer) in names.iter().zip(layers) {
            let fetch = |suffix: &str, shape: &[usize]| -> Result<Vec<f64>, NetError> {
                let key = format!("{path}.{suffix}");
                let t = ckpt
                    .tensors
                    .get(&key)
                    .ok_or_else(|| NetError::SpecMismatch(format!("missing tensor {key}")))?;
                if t.shape != shape {
                    return Err(NetError::SpecMismatch(format!("{key} has shape {:?}, expected {shape:?}", t.shape)));
                }
                Ok(t.data.clone())
            };
            let w = fetch("weight", layer.weight.shape())?;
            let b = fetch("bias", layer.bias.shape())?;
            layer.weight = Array2::from_shape_vec(layer.weight.raw_dim(), w).expect("checked shape");
            layer.bias = Array1::from(b);
        }
        Ok(())
    }
}
