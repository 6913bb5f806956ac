//! Checkpoint file: JSON header line, then each parameter in sorted-name
//! order as `(u32 name length, name bytes, u32 rank, u32 dims…, f64 data…)`,
//! all little-endian, then a CRC-32 of those records.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{FusionModel, ModelConfig, ModelError};
use crate::codec::{self, ByteReader, ByteWriter};
use crate::numerics::{ParameterStore, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
}

pub(crate) fn encode_store<H: Serialize>(header: &H, store: &ParameterStore) -> Vec<u8> {
    let mut w = ByteWriter::new();
    for (name, t) in store.iter() {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u32(t.shape().len() as u32);
        for &d in t.shape() {
            w.u32(d as u32);
        }
        w.f64s(t.data());
    }
    codec::encode_frame(header, &w.into_inner())
}

pub(crate) fn decode_store<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, ParameterStore), ModelError> {
    let malformed = |m: &str| ModelError::Checkpoint(m.to_string());
    let (header_text, rest) = codec::split_header(bytes).ok_or_else(|| malformed("no header line"))?;
    let header: H = codec::parse_header(header_text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let (body, stored) = codec::split_trailer(rest).ok_or_else(|| malformed("missing checksum"))?;
    let computed = codec::crc32(body);
    if stored != computed {
        return Err(ModelError::ChecksumMismatch { stored, computed });
    }
    let mut r = ByteReader::new(body);
    let mut store = ParameterStore::new();
    while r.remaining() > 0 {
        let truncated = || malformed("truncated parameter record");
        let len = r.u32().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| malformed("parameter name is not UTF-8"))?
            .to_string();
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(truncated)? as usize);
        }
        let count: usize = shape.iter().product();
        let data = r.f64s(count).ok_or_else(truncated)?;
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((header, store))
}

pub fn encode_checkpoint(model: &FusionModel) -> Vec<u8> {
    let header = CheckpointHeader { version: CHECKPOINT_FORMAT_VERSION, config: model.config().clone() };
    encode_store(&header, model.params())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FusionModel, ModelError> {
    let (header, store): (CheckpointHeader, _) = decode_store(bytes)?;
    if header.version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {}", header.version)));
    }
    FusionModel::from_parts(header.config, store)
}

pub fn save_checkpoint(model: &FusionModel, path: &Path) -> Result<(), ModelError> {
    codec::write_atomic(path, &encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}
