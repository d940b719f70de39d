//! `EBN1` weight files.
//!
//! Layout: the 4 magic bytes `EBN1`, a little-endian `u64` header length, the
//! UTF-8 JSON header, zero padding up to the next multiple of 8, then the raw
//! little-endian `f32` payload. Tensor offsets in the manifest are relative to
//! the payload start and are multiples of 8.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelGraph, WeightStore};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"EBN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: [usize; 4],
    offset: usize,
    length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    graph: ModelGraph,
    tensors: Vec<TensorEntry>,
}

fn align8(n: usize) -> usize {
    n.div_ceil(8) * 8
}

pub fn write_model(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.weights().len());
    let mut offset = 0;
    for (name, t) in model.weights() {
        let length = t.len() * 4;
        tensors.push(TensorEntry {
            name: name.clone(),
            dtype: "f32".into(),
            shape: t.shape().0,
            offset,
            length,
        });
        offset = align8(offset + length);
    }
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        graph: model.graph().clone(),
        tensors,
    })?;

    let payload_start = align8(12 + header.len());
    let mut out = Vec::with_capacity(payload_start + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.resize(payload_start, 0);
    for t in model.weights().values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.resize(align8(out.len()), 0);
    }
    Ok(out)
}

pub fn read_model(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < 12 {
        return Err(Error::BadMagic(prefix4(bytes)));
    }
    let magic = prefix4(bytes);
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let header_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::InvalidGraph("header length exceeds file size".into()))?;
    let header: Header = serde_json::from_slice(&bytes[12..header_end])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let payload = bytes.get(align8(header_end)..).unwrap_or(&[]);

    let mut weights = WeightStore::new();
    for entry in header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::InvalidGraph(format!(
                "tensor `{}` has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        if entry.offset % 8 != 0 {
            return Err(Error::InvalidGraph(format!("tensor `{}` is not 8-byte aligned", entry.name)));
        }
        let shape = Shape(entry.shape);
        let expected = shape.numel() * 4;
        let available = payload.len().saturating_sub(entry.offset).min(entry.length);
        if entry.length != expected || available != expected {
            return Err(Error::PayloadLengthMismatch {
                name: entry.name,
                expected,
                actual: available,
            });
        }
        let raw = &payload[entry.offset..entry.offset + expected];
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        weights.insert(entry.name, Tensor::from_vec(shape, data)?);
    }
    Model::new(header.graph, weights)
}

fn prefix4(bytes: &[u8]) -> [u8; 4] {
    let mut m = [0u8; 4];
    for (d, s) in m.iter_mut().zip(bytes) {
        *d = *s;
    }
    m
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_model(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}
