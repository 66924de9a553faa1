//! Binary checkpoint container.
//!
//! ```text
//! "STCKPT01" | u64 LE header length | JSON header | f64 LE arrays in header order
//! ```
//!
//! The header names the model kind, the architecture fingerprint, free-form
//! metadata (optimizer step, RNG state, iteration bookkeeping) and the name
//! and length of every stored array. Reals are stored bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Block, DanTr, DanTrArch, DanTrParams, Network};
use crate::error::{Error, IoContext, Result};

const MAGIC: &[u8; 8] = b"STCKPT01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Surrogate,
    Dantr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub fingerprint: String,
    pub metadata: Map<String, Value>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    fingerprint: String,
    metadata: Map<String, Value>,
    arrays: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    len: usize,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, fingerprint: impl Into<String>) -> Self {
        Self {
            kind,
            fingerprint: fingerprint.into(),
            metadata: Map::new(),
            arrays: Vec::new(),
        }
    }

    pub fn with_array(mut self, name: impl Into<String>, values: Vec<f64>) -> Self {
        self.arrays.push((name.into(), values));
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Self {
        self.metadata
            .insert(key.to_string(), serde_json::to_value(value).expect("metadata is serializable"));
        self
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Config(format!("checkpoint has no array `{name}`")))
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint has no metadata `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Single-network checkpoint holding array `params`.
    pub fn from_network(net: &Network) -> Self {
        Checkpoint::new(CheckpointKind::Surrogate, net.block.fingerprint()).with_array("params", net.params.clone())
    }

    /// Transfer-network checkpoint: the architecture goes into the metadata
    /// and the three parameter groups into arrays `shared`, `source`, `target`.
    pub fn from_dantr(net: &DanTr, params: &DanTrParams) -> Self {
        Checkpoint::new(CheckpointKind::Dantr, net.fingerprint())
            .with_meta("arch", &net.arch)
            .with_array("shared", params.shared.clone())
            .with_array("source", params.source.clone())
            .with_array("target", params.target.clone())
    }

    pub fn dantr(&self) -> Result<(DanTr, DanTrParams)> {
        let arch: DanTrArch = self.meta("arch")?;
        let net = DanTr::new(arch)?;
        if net.fingerprint() != self.fingerprint {
            return Err(Error::Fingerprint {
                expected: net.fingerprint(),
                found: self.fingerprint.clone(),
            });
        }
        let params = DanTrParams {
            shared: self.array("shared")?.to_vec(),
            source: self.array("source")?.to_vec(),
            target: self.array("target")?.to_vec(),
        };
        net.check(&params)?;
        Ok((net, params))
    }

    /// The surrogate a checkpoint stands for: the stored network, or the
    /// target branch of a transfer network.
    pub fn surrogate(&self) -> Result<Network> {
        match self.kind {
            CheckpointKind::Surrogate => self.network(&Block::from_fingerprint(&self.fingerprint)?, "params"),
            CheckpointKind::Dantr => {
                let (net, params) = self.dantr()?;
                net.target_network(&params)
            }
        }
    }

    /// Rebuilds the network stored under array `name`, checking the layout.
    pub fn network(&self, block: &Block, name: &str) -> Result<Network> {
        if self.fingerprint != block.fingerprint() {
            return Err(Error::Fingerprint {
                expected: block.fingerprint(),
                found: self.fingerprint.clone(),
            });
        }
        Network::new(block.clone(), self.array(name)?.to_vec())
    }
}

/// Writes via a temporary file and rename so readers never see a partial file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        kind: ckpt.kind,
        fingerprint: ckpt.fingerprint.clone(),
        metadata: ckpt.metadata.clone(),
        arrays: ckpt
            .arrays
            .iter()
            .map(|(n, v)| Entry {
                name: n.clone(),
                len: v.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let total: usize = ckpt.arrays.iter().map(|(_, v)| v.len()).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * total);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, v) in &ckpt.arrays {
        for x in v {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).at(dir)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Reads a checkpoint; with `expected_fingerprint` set, a different
/// architecture is refused.
pub fn load_checkpoint(path: &Path, expected_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path).at(path)?;
    let malformed = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(malformed("missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| malformed("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body])?;
    if let Some(fp) = expected_fingerprint {
        if fp != header.fingerprint {
            return Err(Error::Fingerprint {
                expected: fp.to_string(),
                found: header.fingerprint,
            });
        }
    }
    let total: usize = header.arrays.iter().map(|e| e.len).sum();
    if bytes.len() != body + 8 * total {
        return Err(malformed(&format!(
            "expected {} payload bytes, found {}",
            8 * total,
            bytes.len() - body
        )));
    }
    let mut pos = body;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let v = bytes[pos..pos + 8 * e.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += 8 * e.len;
        arrays.push((e.name, v));
    }
    Ok(Checkpoint {
        kind: header.kind,
        fingerprint: header.fingerprint,
        metadata: header.metadata,
        arrays,
    })
}
