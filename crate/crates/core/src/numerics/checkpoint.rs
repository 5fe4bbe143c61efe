//! Named-tensor container: an 8-byte little-endian header length, a JSON
//! header, then the raw little-endian values of every tensor back to back.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    /// Offset of the first value, counted from the start of the value blob.
    pub byte_offset: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

pub fn encode<T: Scalar>(params: &ParamStore<T>, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut blob = Vec::with_capacity(params.num_values() * T::DTYPE.width());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: T::DTYPE, byte_offset: blob.len() });
        for v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let header = serde_json::to_vec(&Header { tensors, metadata: metadata.clone() })?;
    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Decodes a container; values stored at another width are converted to `T`.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(ParamStore<T>, BTreeMap<String, String>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 8 {
        return Err(bad("truncated header length"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
    let blob = &bytes[header_end..];
    let mut params = ParamStore::new();
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let width = e.dtype.width();
        let end = e.byte_offset + numel * width;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("tensor {} runs past the end of the blob", e.name)));
        }
        let raw = &blob[e.byte_offset..end];
        let data: Vec<T> = match e.dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        params.insert(e.name, Tensor::new(e.shape, data)?)?;
    }
    Ok((params, header.metadata))
}

pub fn save<T: Scalar>(path: &Path, params: &ParamStore<T>, metadata: &BTreeMap<String, String>) -> Result<()> {
    let bytes = encode(params, metadata)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, BTreeMap<String, String>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}
