//! Versioned binary container of named arrays with shape headers.
//!
//! Layout (little endian): magic `HMCK`, `u32` version, `u8` dtype,
//! `u32` metadata length + UTF-8 JSON metadata, `u32` entry count, then per
//! entry `u32` name length + name, `u32` rank, `u64` dims, raw values.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::{ModelConfig, ModelParams, Role};
use super::ModelState;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"HMCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container<T> {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry<T>>,
}

impl<T: Scalar> Container<T> {
    pub fn new() -> Self {
        Self {
            meta: BTreeMap::new(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[T]) {
        self.entries.push(Entry {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::DTYPE);
        let meta = serde_json::to_vec(&self.meta).expect("string map serialises");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.take(1)?[0];
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "dtype tag {dtype} does not match requested {}",
                T::DTYPE
            )));
        }
        let meta_len = r.u32()? as usize;
        let meta: BTreeMap<String, String> = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let width = T::byte_width();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint("shape overflows".into()))?;
            let raw = r.take(n.checked_mul(width).ok_or_else(|| Error::Checkpoint("shape overflows".into()))?)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            entries.push(Entry { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { meta, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
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
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Appends a model's tensors under `prefix.` to a container.
pub fn push_model<T: Scalar>(c: &mut Container<T>, prefix: &str, params: &ModelParams<T>) {
    for (name, _, t) in params.slots() {
        c.push(format!("{prefix}.{name}"), &t.shape, &t.data);
    }
}

/// Fills freshly shaped parameters from `prefix.` entries; every tensor
/// must be present with the exact expected shape.
pub fn read_model<T: Scalar>(
    c: &Container<T>,
    prefix: &str,
    cfg: &ModelConfig,
    with_decoder: bool,
) -> Result<ModelParams<T>> {
    let mut params = ModelParams::zeros(cfg, with_decoder);
    for (name, _, t) in params.slots_mut() {
        let key = format!("{prefix}.{name}");
        let e = c
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        if e.shape != t.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {key} has shape {:?}, expected {:?}",
                e.shape, t.shape
            )));
        }
        t.data.copy_from_slice(&e.data);
    }
    Ok(params)
}

/// Stand-alone single-model checkpoint.
pub fn save_model<T: Scalar>(state: &ModelState<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut c = Container::new();
    c.meta.insert("kind".into(), "model".into());
    c.meta.insert(
        "role".into(),
        serde_json::to_string(&state.role).expect("role serialises"),
    );
    c.meta.insert(
        "config".into(),
        serde_json::to_string(&state.config).expect("config serialises"),
    );
    push_model(&mut c, "model", &state.params);
    c.save(path)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelState<T>> {
    let c = Container::<T>::load(path)?;
    let role: Role = serde_json::from_str(c.meta_str("role")?)
        .map_err(|e| Error::Checkpoint(format!("role: {e}")))?;
    let config: ModelConfig = serde_json::from_str(c.meta_str("config")?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let params = read_model(&c, "model", &config, role == Role::Student)?;
    Ok(ModelState { role, config, params })
}
