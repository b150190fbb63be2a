//! Binary tensor container.
//!
//! ```text
//! "OURO" | version u32 | count u64 |
//!   count × ( name_len u32 | name utf-8 | dtype u8 | rank u32 | rank × extent u64 | payload )
//! | crc32 u32 over every preceding byte
//! ```
//! All integers and payload scalars are little-endian. Dtype codes: 0 = f32, 1 = f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"OURO";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;
const CRC_LEN: usize = 4;

pub fn encode<T: Element>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &x in p.tensor.data() {
            x.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// One tensor as stored, before conversion to a concrete dtype.
pub struct RawTensor<'a> {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: &'a [u8],
}

impl RawTensor<'_> {
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        match self.dtype {
            DType::F32 => Ok(Self::read::<f32>(self.payload, &self.shape)?.cast()),
            DType::F64 => Ok(Self::read::<f64>(self.payload, &self.shape)?.cast()),
        }
    }

    fn read<U: Element>(payload: &[u8], shape: &[usize]) -> Result<Tensor<U>> {
        let w = U::DTYPE.width();
        Tensor::new(shape.to_vec(), payload.chunks_exact(w).map(U::read_le).collect())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Malformed(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Validates magic, version and checksum, then splits the container into tensors.
pub fn parse(bytes: &[u8]) -> Result<Vec<RawTensor<'_>>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(Error::Malformed(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let count = r.u64("tensor count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Malformed(format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| Error::Malformed(format!("`{name}` has unknown dtype code {code}")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("extent")?).map_err(|_| Error::Malformed("extent overflows usize".into()))?);
        }
        let len = shape
            .iter()
            .try_fold(dtype.width(), |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Malformed(format!("`{name}` payload size overflows")))?;
        let payload = r.take(len, "payload")?;
        out.push(RawTensor { name, dtype, shape, payload });
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes after the last tensor", body.len() - r.pos)));
    }
    Ok(out)
}

/// Decodes a container whose tensors all have dtype `T`. Every tensor comes back trainable.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for raw in parse(bytes)? {
        if raw.dtype != T::DTYPE {
            return Err(Error::DTypeMismatch {
                expected: T::DTYPE.name(),
                found: raw.dtype.name(),
            });
        }
        let t = raw.to_tensor::<T>()?;
        store.insert(raw.name, t, false);
    }
    Ok(store)
}

/// Like [`decode`], but converts every tensor to `T`.
pub fn decode_as<T: Element>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for raw in parse(bytes)? {
        let t = raw.to_tensor::<T>()?;
        store.insert(raw.name, t, false);
    }
    Ok(store)
}

/// Writes through a sibling temporary file so a crash never leaves a half-written container.
pub fn save<T: Element>(path: &Path, store: &ParamStore<T>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(store))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode(&fs::read(path)?)
}

pub fn load_as<T: Element>(path: &Path) -> Result<ParamStore<T>> {
    decode_as(&fs::read(path)?)
}

#[cfg(test)]
mod tests;
