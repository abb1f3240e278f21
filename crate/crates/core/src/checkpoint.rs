//! Single-file container of named arrays plus a JSON header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DAETCKPT" | u32 version | u64 header_len | header (UTF-8 JSON)
//! u32 array_count
//! per array, in name order:
//!   u32 name_len | name | u8 dtype (0 = f32, 1 = f64) | u32 ndim | u64 dims[ndim]
//!   u64 byte_len | data
//! ```
//!
//! The header is serialized with sorted keys, so `save -> load -> save`
//! reproduces the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DAETCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub dtype: &'static str,
    pub shape: Vec<usize>,
    /// Raw little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl Array {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes: T::to_le_bytes_vec(t.data()),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::format(
                "checkpoint",
                format!("array stored as {}, requested {}", self.dtype, T::DTYPE),
            ));
        }
        let data = T::from_le_bytes_slice(&self.bytes).ok_or_else(|| Error::format("checkpoint", "ragged array bytes"))?;
        Tensor::from_vec(&self.shape, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn new(header: &impl Serialize) -> Self {
        Self {
            header: serde_json::to_value(header).expect("header serializes"),
            arrays: BTreeMap::new(),
        }
    }

    pub fn header_as<H: DeserializeOwned>(&self) -> Result<H> {
        serde_json::from_value(self.header.clone()).map_err(|e| Error::format("checkpoint header", e.to_string()))
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.arrays.insert(name.into(), Array::from_tensor(t));
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::format("checkpoint", format!("array {name} missing")))?
            .to_tensor()
    }

    /// Stores every parameter under `prefix` + its name.
    pub fn insert_params<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    /// Overwrites every parameter of `store` from the arrays under `prefix`;
    /// names and shapes must match exactly.
    pub fn load_params<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let mut named = BTreeMap::new();
        for (name, a) in self.arrays.iter().filter_map(|(k, a)| k.strip_prefix(prefix).map(|n| (n, a))) {
            named.insert(name.to_string(), a.to_tensor()?);
        }
        if named.len() != store.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} arrays under {prefix:?}, model has {} parameters", named.len(), store.len()),
            ));
        }
        store.load_named(&named)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("json value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match a.dtype {
                "f32" => 0,
                _ => 1,
            });
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for d in &a.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(a.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&a.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format("checkpoint", format!("unsupported format version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format("checkpoint header", e.to_string()))?;
        let count = r.u32()?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::format("checkpoint", e.to_string()))?;
            let dtype = match r.take(1)?[0] {
                0 => "f32",
                1 => "f64",
                d => return Err(Error::format("checkpoint", format!("unknown dtype tag {d}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let blen = r.u64()? as usize;
            let width = if dtype == "f32" { 4 } else { 8 };
            if blen != shape.iter().product::<usize>() * width {
                return Err(Error::format("checkpoint", format!("array {name}: byte length {blen} disagrees with shape {shape:?}")));
            }
            let data = r.take(blen)?.to_vec();
            arrays.insert(name, Array { dtype, shape, bytes: data });
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { header, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Lower-case hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a file on disk.
pub fn file_hash(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
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
}
