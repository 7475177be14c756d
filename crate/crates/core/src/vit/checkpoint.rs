//! `IMAC` checkpoint format.
//!
//! ```text
//! "IMAC"              4 bytes
//! version             u32 LE (= 1)
//! config length       u32 LE
//! header              UTF-8 JSON: ModelConfig fields plus optional "provenance"
//! parameters          f64 LE, every tensor in canonical order, row-major
//! ```
//!
//! The parameter section length is implied by the config; files with missing
//! or trailing bytes are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{param_shapes, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IMAC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

pub fn write_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    encode_checkpoint(params, None)
}

/// Checkpoint bytes with `provenance` stored in the JSON header.
pub fn encode_checkpoint(
    params: &ModelParams,
    provenance: Option<&serde_json::Value>,
) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&Header {
        config: params.config().clone(),
        provenance: provenance.cloned(),
    })?;
    let mut out = Vec::with_capacity(12 + config.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    for t in params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    decode_checkpoint(bytes).map(|(p, _)| p)
}

/// Parameters and the stored provenance, if any.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, Option<serde_json::Value>)> {
    let fail = |offset: usize, reason: String| Error::Format {
        format: "IMAC",
        offset,
        reason,
    };
    let take = |offset: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(offset..offset + n)
            .ok_or_else(|| fail(bytes.len(), format!("truncated, needed {n} bytes at {offset}")))
    };
    if take(0, 4)? != MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(take(8, 4)?.try_into().unwrap()) as usize;
    let Header { config, provenance } = serde_json::from_slice(take(12, len)?)
        .map_err(|e| fail(12, format!("config JSON: {e}")))?;
    config
        .validate()
        .map_err(|e| fail(12, e.to_string()))?;

    let mut offset = 12 + len;
    let expected = offset + config.param_count() * 8;
    if bytes.len() != expected {
        return Err(fail(
            bytes.len().min(expected),
            format!("expected {expected} bytes in total, found {}", bytes.len()),
        ));
    }
    let mut tensors = Vec::new();
    for shape in param_shapes(&config) {
        let n: usize = shape.iter().product();
        let data = bytes[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n * 8;
        tensors.push(Tensor::new(shape, data)?);
    }
    Ok((ModelParams::from_tensors(config, tensors)?, provenance))
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint(params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    read_checkpoint(&fs::read(path)?)
}
