//! Binary weight files.
//!
//! Layout, little-endian:
//!
//! ```text
//! magic (8 bytes) | version u32
//! config length u64 | config TOML
//! tensor count u64 | per tensor: name length u32, name, rank u32,
//!                    dims u64 * rank, payload offset u64 (in values),
//!                    SHA-256 of the tensor's bytes (32)
//! payload length u64 (in values) | payload f64 * length
//! SHA-256 of everything above (32)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ActModel, ModelConfig};
use crate::error::{ActError, Result};
use crate::tensor::Tensor;

pub const WEIGHT_MAGIC: &[u8; 8] = b"ACTWGHT\0";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Serializes every parameter of `model`.
pub fn encode(model: &ActModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
    let config = model.config().to_toml();
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    let params: Vec<_> = model.params().iter().collect();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    let mut payload = Vec::new();
    for p in &params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        let bytes = tensor_bytes(&p.tensor);
        out.extend_from_slice(&Sha256::digest(&bytes));
        offset += p.tensor.numel() as u64;
        payload.extend_from_slice(&bytes);
    }
    out.extend_from_slice(&offset.to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes the weights to `path`. The file is written to a sibling temporary
/// and renamed, so an interrupted save never leaves a partial file.
pub fn save_weights(model: &ActModel, path: &Path) -> Result<()> {
    let bytes = encode(model);
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| ActError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        ActError::io(path, e)
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ActError::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| ActError::Format("length overflows usize".into()))
    }
}

/// Parses a weight file. With `expected` set, the embedded config must match
/// it field for field.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ActModel> {
    if bytes.len() < WEIGHT_MAGIC.len() || &bytes[..8] != WEIGHT_MAGIC {
        return Err(ActError::Format("not a weight file (bad magic)".into()));
    }
    if bytes.len() >= 12 {
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != WEIGHT_FORMAT_VERSION {
            return Err(ActError::Version {
                expected: WEIGHT_FORMAT_VERSION,
                found: version,
            });
        }
    }
    if bytes.len() < 12 + 32 {
        return Err(ActError::Checksum("file too short to hold a checksum".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ActError::Checksum("whole-file digest does not match (truncated or corrupted)".into()));
    }

    let mut r = Reader { bytes: body, pos: 12 };
    let config_len = r.len()?;
    let config_text = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| ActError::Format("config is not UTF-8".into()))?;
    let config = ModelConfig::from_toml(config_text)?;
    if let Some(expected) = expected {
        expected.check_matches(&config)?;
    }

    let count = r.len()?;
    let mut manifest = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ActError::Format("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let offset = r.len()?;
        let sha: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        manifest.push((name, shape, offset, sha));
    }
    let total = r.len()?;
    let payload = r.take(total.checked_mul(8).ok_or_else(|| ActError::Format("payload overflow".into()))?)?;
    if r.pos != body.len() {
        return Err(ActError::Format("trailing bytes after payload".into()));
    }

    let mut model = ActModel::new(config)?;
    if model.params().len() != manifest.len() {
        return Err(ActError::Format(format!(
            "file holds {} tensors, model has {}",
            manifest.len(),
            model.params().len()
        )));
    }
    let mut loaded = Vec::with_capacity(manifest.len());
    for (name, shape, offset, sha) in manifest {
        let id = model
            .params()
            .id_of(&name)
            .ok_or_else(|| ActError::Format(format!("unknown tensor `{name}`")))?;
        if model.params().get(id).tensor.shape() != shape.as_slice() {
            return Err(ActError::Format(format!(
                "tensor `{name}` has shape {shape:?}, model expects {:?}",
                model.params().get(id).tensor.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let range = offset
            .checked_mul(8)
            .and_then(|start| Some(start..start.checked_add(numel * 8)?))
            .filter(|r| r.end <= payload.len())
            .ok_or_else(|| ActError::Format(format!("tensor `{name}` lies outside the payload")))?;
        let raw = &payload[range];
        if Sha256::digest(raw).as_slice() != sha {
            return Err(ActError::Checksum(format!("tensor `{name}`")));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        loaded.push((id, Tensor::new(shape, data)?));
    }
    // Only touch the model once every tensor has been validated.
    for (id, tensor) in loaded {
        *model.params_mut().tensor_mut(id) = tensor;
    }
    Ok(model)
}

/// Reads a weight file written by [`save_weights`].
pub fn load_weights(path: &Path, expected: Option<&ModelConfig>) -> Result<ActModel> {
    let bytes = fs::read(path).map_err(|e| ActError::io(path, e))?;
    decode(&bytes, expected)
}
