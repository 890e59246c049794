//! `AMDC` checkpoint container.
//!
//! ```text
//! "AMDC" | version: u32 LE | header_len: u32 LE | header (UTF-8 JSON)
//!        | tensor payloads (f64 LE) | mask bitsets
//! ```
//!
//! The header holds the model configuration, a tensor directory of
//! `(name, shape, offset, length)`, a mask directory of `(name, offset,
//! length)` and free-form string metadata. Offsets are relative to the end
//! of the header; tensors come first, in directory order, followed by masks.
//! A mask bitset lists heads then MLP units for each layer in turn, one bit
//! per unit, least significant bit first, zero-padded to a whole byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use amd_core::{ModelConfig, ParameterStore, StructuralMask, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"AMDC";
pub const VERSION: u32 = 1;
/// Magic, version and header length.
pub const PREAMBLE: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub name: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub masks: Vec<MaskEntry>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Named tensors; not necessarily a full model layout.
    pub store: ParameterStore,
    pub masks: Vec<(String, StructuralMask)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, store: ParameterStore) -> Self {
        Checkpoint {
            config,
            store,
            masks: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn mask(&self, name: &str) -> Option<&StructuralMask> {
        self.masks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Tensor and mask contents are equal bit for bit.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.config == other.config && self.store.bit_eq(&other.store) && self.masks == other.masks && self.meta == other.meta
    }
}

pub fn header_of(ckpt: &Checkpoint) -> Header {
    let mut offset = 0u64;
    let tensors = ckpt
        .store
        .iter()
        .map(|(name, t)| {
            let length = (t.len() * 8) as u64;
            let e = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                length,
            };
            offset += length;
            e
        })
        .collect();
    let masks = ckpt
        .masks
        .iter()
        .map(|(name, m)| {
            let length = m.to_bytes().len() as u64;
            let e = MaskEntry {
                name: name.clone(),
                offset,
                length,
            };
            offset += length;
            e
        })
        .collect();
    Header {
        config: ckpt.config,
        tensors,
        masks,
        meta: ckpt.meta.clone(),
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&header_of(ckpt)).expect("header serializes");
    let payload: usize = ckpt.store.num_params() * 8 + ckpt.masks.iter().map(|(_, m)| m.to_bytes().len()).sum::<usize>();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in ckpt.store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for (_, m) in &ckpt.masks {
        out.extend_from_slice(&m.to_bytes());
    }
    out
}

fn corrupt(msg: impl Into<String>) -> HarnessError {
    HarnessError::Corrupt(msg.into())
}

/// Splits a container into its header and payload without decoding tensors.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(HarnessError::Format("not an AMDC container (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(HarnessError::Format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = PREAMBLE
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {len} exceeds container size {}", bytes.len())))?;
    let text = std::str::from_utf8(&bytes[PREAMBLE..end]).map_err(|e| corrupt(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    Ok((header, end))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, start) = read_header(bytes)?;
    let payload = &bytes[start..];
    let mut expected = 0u64;
    let mut slice = |offset: u64, length: u64, what: &str| -> Result<&[u8]> {
        if offset != expected {
            return Err(corrupt(format!("{what}: offset {offset}, expected {expected}")));
        }
        expected = offset + length;
        payload
            .get(offset as usize..expected as usize)
            .ok_or_else(|| corrupt(format!("{what}: payload ends at {} bytes, need {expected}", payload.len())))
    };
    let mut entries = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let raw = slice(e.offset, e.length, &e.name)?;
        let count: usize = e.shape.iter().product();
        if count * 8 != e.length as usize {
            return Err(corrupt(format!(
                "tensor {}: shape {:?} needs {} bytes, directory says {}",
                e.name,
                e.shape,
                count * 8,
                e.length
            )));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&e.shape, data).map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))?;
        entries.push((e.name.clone(), t));
    }
    let mut masks = Vec::with_capacity(header.masks.len());
    for e in &header.masks {
        let raw = slice(e.offset, e.length, &e.name)?;
        let m = StructuralMask::from_bytes(&header.config, raw).map_err(|err| corrupt(format!("mask {}: {err}", e.name)))?;
        masks.push((e.name.clone(), m));
    }
    if expected as usize != payload.len() {
        return Err(corrupt(format!(
            "directory covers {expected} payload bytes, container has {}",
            payload.len()
        )));
    }
    let store = ParameterStore::from_parts(entries).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint {
        config: header.config,
        store,
        masks,
        meta: header.meta,
    })
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HarnessError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| HarnessError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| HarnessError::io(path, e))?;
    tmp.persist(path).map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode(ckpt))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let c = ModelConfig::desk();
        let store = ParameterStore::init(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ck = Checkpoint::new(c, store);
        ck.masks.push(("full".into(), StructuralMask::full(&c)));
        ck.masks.push(("minimal".into(), StructuralMask::minimal(&c)));
        ck.meta.insert("stage".into(), "test".into());
        ck
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let back = decode(&encode(&ck)).unwrap();
        assert!(ck.bit_eq(&back));
    }

    #[test]
    fn size_is_header_plus_payload() {
        let ck = sample();
        let bytes = encode(&ck);
        let (header, start) = read_header(&bytes).unwrap();
        let tensors: u64 = header.tensors.iter().map(|e| e.length).sum();
        let masks: u64 = header.masks.iter().map(|e| e.length).sum();
        assert_eq!(bytes.len() as u64, start as u64 + tensors + masks);
        assert_eq!(tensors, 8 * ck.store.num_params() as u64);
        // 4 layers × (8 heads + 64 units) = 288 bits
        assert_eq!(header.masks[0].length, 36);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let bytes = encode(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(HarnessError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode(&bad), Err(HarnessError::Format(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(HarnessError::Corrupt(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(HarnessError::Corrupt(_))));
    }
}
