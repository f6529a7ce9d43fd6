//! Weight checkpoint container.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic "GDEFUSE1"
//! bytes 8..16   header length L, u64 little-endian
//! bytes 16..16+L  UTF-8 JSON header
//! then          every tensor as little-endian f64, in header order
//! ```
//!
//! The header records the model configuration and the name and length of
//! every tensor, so the file can be read without knowing the model in advance.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::FusionError;
use crate::scalar::Scalar;

use super::layers::MaskMode;
use super::model::{FusionModel, FusionParams, ModelConfig, NormPlacement};

pub const MAGIC: &[u8; 8] = b"GDEFUSE1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub channels: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub window_radius: usize,
    pub mask_mode: MaskMode,
    pub norm_placement: NormPlacement,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            window_radius: self.window_radius,
            mask_mode: self.mask_mode,
            norm_placement: self.norm_placement,
        }
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &FusionModel<T>, mut out: W) -> Result<(), FusionError> {
    let c = &model.config;
    let mut tensors = Vec::new();
    model.params.for_each_tensor(|name, t| tensors.push(TensorEntry { name, len: t.len() }));
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        channels: c.channels,
        heads: c.heads,
        encoder_layers: c.encoder_layers,
        decoder_layers: c.decoder_layers,
        window_radius: c.window_radius,
        mask_mode: c.mask_mode,
        norm_placement: c.norm_placement,
        dtype: "f64le".into(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| FusionError::Checkpoint(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut body = Vec::with_capacity(model.params.parameter_count() * 8);
    model.params.for_each_tensor(|_, t| {
        for v in t {
            body.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    });
    out.write_all(&body)?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut input: R) -> Result<FusionModel<T>, FusionError> {
    let bad = |m: String| FusionError::Checkpoint(m);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    if header.version != FORMAT_VERSION || header.dtype != "f64le" {
        return Err(bad(format!("unsupported version {} / dtype {}", header.version, header.dtype)));
    }
    let config = header.config();
    config.validate()?;
    let mut params = FusionParams::<T>::zeros(&config);
    let mut expected = Vec::new();
    params.for_each_tensor(|name, t| expected.push(TensorEntry { name, len: t.len() }));
    if expected != header.tensors {
        return Err(bad("tensor table does not match the declared configuration".into()));
    }
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    let total: usize = expected.iter().map(|e| e.len).sum();
    if body.len() != total * 8 {
        return Err(bad(format!("expected {} data bytes, found {}", total * 8, body.len())));
    }
    let mut chunks = body.chunks_exact(8);
    params.for_each_tensor_mut(|_, t| {
        for v in t.iter_mut() {
            let bytes: [u8; 8] = chunks.next().unwrap().try_into().unwrap();
            *v = T::lit(f64::from_le_bytes(bytes));
        }
    });
    FusionModel::new(config, params)
}
