//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"SRU1"
//! version u32
//! meta    u32 count, then (u32 len, utf-8 key, u32 len, utf-8 value)*
//! tensors u32 count, then per tensor:
//!         u32 len, utf-8 name, u8 precision tag, u32 rank, u64 dims[rank],
//!         row-major values
//! digest  32-byte SHA-256 of every preceding byte
//! ```
//!
//! Precision tags: 0 = f32, 1 = f64, 2 = u32, 3 = i64.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, SruError};
use crate::harness::report::write_atomic;
use crate::numerics::{ParamStore, Precision, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SRU1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Raw values of a stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    I64(Vec<i64>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U32(_) => 2,
            TensorData::I64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    fn bitwise_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::U32(a), TensorData::U32(b)) => a == b,
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SruError::dim("named tensor", &[n], &[data.len()]));
        }
        Ok(NamedTensor { name: name.into(), shape, data })
    }

    pub fn real<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::PRECISION {
            Precision::F32 => TensorData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect()),
            Precision::F64 => TensorData::F64(t.data().iter().map(|x| x.as_f64()).collect()),
        };
        NamedTensor { name: name.into(), shape: t.shape().to_vec(), data }
    }

    /// The tensor as reals of precision `T`; the stored precision must match.
    pub fn to_real<T: Real>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match (&self.data, T::PRECISION) {
            (TensorData::F32(v), Precision::F32) => v.iter().map(|&x| T::of(x as f64)).collect(),
            (TensorData::F64(v), Precision::F64) => v.iter().map(|&x| T::of(x)).collect(),
            _ => {
                return Err(SruError::contract(format!(
                    "tensor {} is stored with precision tag {}, requested {:?}",
                    self.name,
                    self.data.tag(),
                    T::PRECISION
                )))
            }
        };
        Tensor::from_vec(&self.shape, data)
    }
}

/// Metadata plus an ordered table of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata.get(key).map(String::as_str).ok_or_else(|| SruError::Lookup {
            what: "checkpoint metadata",
            key: key.to_string(),
        })
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| SruError::Lookup {
            what: "checkpoint tensor",
            key: name.to_string(),
        })
    }

    pub fn push(&mut self, t: NamedTensor) {
        self.tensors.push(t);
    }

    pub fn push_params<T: Real>(&mut self, prefix: &str, params: &ParamStore<T>) {
        for id in params.ids() {
            self.push(NamedTensor::real(format!("{prefix}{}", params.name(id)), params.value(id)));
        }
    }

    /// All tensors named `prefix*` as a parameter store with the prefix removed.
    pub fn params<T: Real>(&self, prefix: &str) -> Result<ParamStore<T>> {
        let entries = self
            .tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix(prefix).map(|n| (n, t)))
            .map(|(n, t)| Ok((n.to_string(), t.to_real::<T>()?)))
            .collect::<Result<Vec<_>>>()?;
        ParamStore::new(entries)
    }

    /// Same metadata and bit-identical tensors.
    pub fn bitwise_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.name == b.name && a.shape == b.shape && a.data.bitwise_eq(&b.data)
            })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.data.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Decodes a checkpoint; nothing is returned unless every check passes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            let found: Vec<u8> = bytes.iter().take(4).copied().collect();
            return Err(SruError::Version(format!(
                "not a checkpoint: magic {:?}, expected {:?}",
                String::from_utf8_lossy(&found),
                std::str::from_utf8(MAGIC).unwrap()
            )));
        }
        let mut r = Reader { bytes, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(SruError::Version(format!(
                "checkpoint format version {version}, supported {VERSION}"
            )));
        }
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(r.integrity("file too short for digest"));
        }
        let body = bytes.len() - DIGEST_LEN;
        if Sha256::digest(&bytes[..body]).as_slice() != &bytes[body..] {
            return Err(SruError::Integrity {
                offset: body as u64,
                message: "digest mismatch".into(),
            });
        }
        r.bytes = &bytes[..body];

        let mut ck = Checkpoint::default();
        for _ in 0..r.u32()? {
            let (k, v) = (r.string()?, r.string()?);
            if ck.metadata.insert(k, v).is_some() {
                return Err(r.integrity("duplicate metadata key"));
            }
        }
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            let mut count: u64 = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                count = count.checked_mul(d).ok_or_else(|| r.integrity("shape product overflows"))?;
                shape.push(d as usize);
            }
            let width: u64 = match tag {
                0 | 2 => 4,
                1 | 3 => 8,
                _ => return Err(r.integrity(format!("unknown precision tag {tag}"))),
            };
            let nbytes = count
                .checked_mul(width)
                .filter(|&n| n <= (r.bytes.len() - r.pos) as u64)
                .ok_or_else(|| r.integrity(format!("tensor {name} data runs past the end")))?;
            let raw = r.take(nbytes as usize)?;
            let w = width as usize;
            let data = match tag {
                0 => TensorData::F32(raw.chunks_exact(w).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(raw.chunks_exact(w).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => TensorData::U32(raw.chunks_exact(w).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
                _ => TensorData::I64(raw.chunks_exact(w).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
            };
            ck.tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != r.bytes.len() {
            return Err(r.integrity("trailing bytes before digest"));
        }
        Ok(ck)
    }

    /// Writes atomically; returns the number of bytes written.
    pub fn save(&self, path: &Path) -> Result<usize> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the recorded `config_hash` against `expected`.
    /// A mismatch is an error unless `force` is set.
    pub fn load_checked(path: &Path, expected: &str, force: bool) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        let recorded = ck.meta("config_hash")?;
        if recorded != expected {
            if !force {
                return Err(SruError::StaleArtifact {
                    path: path.to_path_buf(),
                    recorded: recorded.to_string(),
                    current: expected.to_string(),
                });
            }
            log::warn!("loading {} despite config hash mismatch", path.display());
        }
        Ok(ck)
    }
}

/// Hex SHA-256 digest stored at the end of an encoded checkpoint.
pub fn digest_hex(bytes: &[u8]) -> String {
    let tail = &bytes[bytes.len().saturating_sub(DIGEST_LEN)..];
    tail.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn integrity(&self, message: impl Into<String>) -> SruError {
        SruError::Integrity {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.bytes.len() - self.pos {
            return Err(self.integrity(format!("truncated: wanted {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| SruError::Integrity {
            offset: at as u64,
            message: "invalid utf-8".into(),
        })
    }
}
