//! MDCK checkpoint container: a named, canonically ordered set of tensors.
//!
//! Entries live in a `BTreeMap`, so iteration — and therefore the encoded
//! byte stream and any digest over it — depends only on contents, never on
//! insertion order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{MdError, Result};
use crate::io::tensor_file::{atomic_write, decode_record, encode_record, TensorRecord};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Longest accepted entry name, in bytes. The format field is u16, but
/// nothing legitimate comes close to even this.
const MAX_NAME_LEN: usize = 4096;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in canonical (lexicographic) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorRecord)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Insert or replace an entry. Replacement is deliberate: updating a
    /// checkpoint in place (fusing, stashing) overwrites by name.
    pub fn insert(&mut self, name: &str, rec: TensorRecord) -> Result<()> {
        if name.is_empty() || name.len() > MAX_NAME_LEN {
            return Err(MdError::Config(format!(
                "checkpoint entry name must be 1..={MAX_NAME_LEN} bytes, got {}",
                name.len()
            )));
        }
        self.entries.insert(name.to_string(), rec);
        Ok(())
    }

    pub fn insert_tensor<S: Scalar>(&mut self, name: &str, t: &Tensor<S>) -> Result<()> {
        self.insert(name, TensorRecord::from_tensor(t))
    }

    pub fn insert_u32(&mut self, name: &str, data: &[u32]) -> Result<()> {
        if data.is_empty() {
            return Err(MdError::Config(format!(
                "checkpoint entry '{name}' would be empty"
            )));
        }
        self.insert(
            name,
            TensorRecord::U32 {
                dims: vec![data.len()],
                data: data.to_vec(),
            },
        )
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.entries.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<TensorRecord> {
        self.entries.remove(name)
    }

    /// Fetch a numeric tensor by name; missing entries and dtype
    /// mismatches are hard errors naming the entry.
    pub fn tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>> {
        self.require(name)?.to_tensor::<S>(name)
    }

    pub fn u32s(&self, name: &str) -> Result<Vec<u32>> {
        self.require(name)?.to_labels(name)
    }

    fn require(&self, name: &str) -> Result<&TensorRecord> {
        self.entries
            .get(name)
            .ok_or_else(|| MdError::Integrity(format!("checkpoint entry '{name}' is missing")))
    }

    /// Canonical encoding: header, then entries in name order, each as
    /// `name_len u16 | name | MDTB record`.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, rec) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_record(rec, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8], what: &str) -> Result<Self> {
        let mut pos = 0usize;
        let need = |pos: &usize, n: usize| -> Result<()> {
            if *pos + n > bytes.len() {
                Err(MdError::format(
                    what,
                    format!(
                        "truncated: wanted {n} bytes at offset {pos}, have {}",
                        bytes.len()
                    ),
                ))
            } else {
                Ok(())
            }
        };
        need(&pos, 12)?;
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return Err(MdError::format(
                what,
                format!("bad magic {:02x?}, expected \"MDCK\"", &bytes[0..4]),
            ));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(MdError::format(
                what,
                format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        pos = 12;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            need(&pos, 2)?;
            let name_len = u16::from_le_bytes(bytes[pos..pos + 2].try_into().unwrap()) as usize;
            pos += 2;
            need(&pos, name_len)?;
            let name = std::str::from_utf8(&bytes[pos..pos + name_len])
                .map_err(|_| MdError::format(what, "entry name is not valid utf-8"))?
                .to_string();
            pos += name_len;
            let rec = decode_record(bytes, &mut pos, &format!("{what}:{name}"))?;
            if entries.insert(name.clone(), rec).is_some() {
                return Err(MdError::format(what, format!("duplicate entry '{name}'")));
            }
        }
        if pos != bytes.len() {
            return Err(MdError::format(
                what,
                format!("{} trailing bytes after {count} entries", bytes.len() - pos),
            ));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MdError::io(path.display().to_string(), e))?;
        Self::decode(&bytes, &path.display().to_string())
    }

    /// SHA-256 over the canonical encoding of every entry whose name starts
    /// with `prefix` (`""` digests the whole checkpoint). Returns lowercase
    /// hex. Two checkpoints agree on a digest iff the covered entries are
    /// byte-identical.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (name, rec) in &self.entries {
            if !name.starts_with(prefix) {
                continue;
            }
            buf.clear();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            encode_record(rec, &mut buf);
            h.update(&buf);
        }
        let out = h.finalize();
        let mut hex = String::with_capacity(64);
        for b in out {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }
}
