//! Named-tensor checkpoint container.
//!
//! Layout: magic `PCKP`, u32 format version (LE), u64 header length (LE),
//! a JSON header describing the tensors (name, dtype, shape, offset and
//! element count into the payload), then the raw little-endian payload.
//! Round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::layers::Network;
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCKP";
const VERSION: u32 = 1;

#[cfg(not(feature = "f64"))]
const DTYPE: &str = "f32";
#[cfg(feature = "f64")]
const DTYPE: &str = "f64";

const ELEM_BYTES: usize = std::mem::size_of::<Real>();

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    tensors: Vec<TensorEntry>,
}

/// Write named tensors to `path`.
pub fn save(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            dtype: DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let header = serde_json::to_vec(&Header {
        version: VERSION,
        tensors: entries,
    })?;

    let mut bytes = Vec::with_capacity(16 + header.len() + offset * ELEM_BYTES);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, t) in tensors {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read every tensor from `path`.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "not a checkpoint file (bad magic)".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(Error::Format {
            offset: 16,
            detail: "truncated header".into(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    let payload = &bytes[header_end..];

    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != DTYPE {
            return Err(Error::Format {
                offset: header_end as u64,
                detail: format!("tensor {} has dtype {}, this build reads {DTYPE}", e.name, e.dtype),
            });
        }
        let start = e.offset * ELEM_BYTES;
        let end = start + e.len * ELEM_BYTES;
        if payload.len() < end {
            return Err(Error::Format {
                offset: (header_end + payload.len()) as u64,
                detail: format!("payload truncated while reading {}", e.name),
            });
        }
        let data: Vec<Real> = payload[start..end]
            .chunks_exact(ELEM_BYTES)
            .map(|c| Real::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((e.name, Tensor::from_vec(&e.shape, data)?));
    }
    Ok(out)
}

/// Parameter names of a network, checkpoint order: per block `w`, `b`,
/// then `bn.gamma`, `bn.beta`, `bn.mu_r`, `bn.var_r` when present.
fn named_tensors(net: &Network) -> Vec<(String, &Tensor)> {
    let mut out = Vec::new();
    for (i, block) in net.blocks.iter().enumerate() {
        let params = block.params();
        out.push((format!("block{i}.w"), params[0]));
        out.push((format!("block{i}.b"), params[1]));
        if let Some(bn) = &block.bn {
            out.push((format!("block{i}.bn.gamma"), &bn.gamma));
            out.push((format!("block{i}.bn.beta"), &bn.beta));
            out.push((format!("block{i}.bn.mu_r"), &bn.mu_r));
            out.push((format!("block{i}.bn.var_r"), &bn.var_r));
        }
    }
    out
}

/// Save every parameter and BN statistic of `net`.
pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    save(path, &named_tensors(net))
}

/// Load a checkpoint into a structurally matching network (same blocks,
/// same shapes).
pub fn load_network(path: &Path, net: &mut Network) -> Result<()> {
    let tensors = load(path)?;
    let mut by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    for (i, block) in net.blocks.iter_mut().enumerate() {
        let mut take = |name: String, dst: &mut Tensor| -> Result<()> {
            let t = by_name.remove(&name).ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("checkpoint missing tensor {name}"),
            })?;
            if t.shape() != dst.shape() {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!("{name}: checkpoint {:?} vs network {:?}", t.shape(), dst.shape()),
                });
            }
            *dst = t;
            Ok(())
        };
        {
            let mut params = block.params_mut();
            take(format!("block{i}.w"), params[0])?;
            take(format!("block{i}.b"), params[1])?;
        }
        if let Some(bn) = &mut block.bn {
            take(format!("block{i}.bn.gamma"), &mut bn.gamma)?;
            take(format!("block{i}.bn.beta"), &mut bn.beta)?;
            take(format!("block{i}.bn.mu_r"), &mut bn.mu_r)?;
            take(format!("block{i}.bn.var_r"), &mut bn.var_r)?;
        }
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format {
            offset: 0,
            detail: format!("checkpoint tensor {extra} has no home in this network"),
        });
    }
    Ok(())
}
