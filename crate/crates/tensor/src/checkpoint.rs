//! Named parameter storage and the binary checkpoint payload.
//!
//! Layout: magic bytes "OSTY", format version (u32 LE), tensor count
//! (u32 LE), then per tensor: name length (u32 LE) + UTF-8 name, rank
//! (u32 LE), extents (u64 LE each), data (f64 LE each). Entries are
//! written in insertion order, so identical stores serialize to
//! identical bytes.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"OSTY";
const CHECKPOINT_VERSION: u32 = 1;

/// Ordered name -> tensor map holding model parameters and their grads.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = tensor,
            None => {
                self.index.insert(name.clone(), self.tensors.len());
                self.names.push(name);
                self.tensors.push(tensor);
            }
        }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        &mut self.tensors[i]
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|n| n.as_str())
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) {
        self.get_mut(name).accumulate_grad(delta);
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.zero_grad();
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Serializes `store` atomically (write temp file, then rename).
pub fn write_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(TensorError::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn read_u32(buf: &mut &[u8], what: &str) -> Result<u32> {
    let b = take(buf, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut buf = bytes.as_slice();
    let magic = take(&mut buf, 4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TensorError::Checkpoint(format!(
            "bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut buf, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let count = read_u32(&mut buf, "tensor count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut buf, "name length")? as usize;
        let name = std::str::from_utf8(take(&mut buf, name_len, "name")?)
            .map_err(|e| TensorError::Checkpoint(format!("invalid name: {e}")))?
            .to_string();
        let rank = read_u32(&mut buf, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let b = take(&mut buf, 8, "extent")?;
            shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut buf, n * 8, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::param(&shape, data)?);
    }
    if !buf.is_empty() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes",
            buf.len()
        )));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::param(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.125]).unwrap());
        s.insert("a.b", Tensor::param(&[3], vec![0.5, 0.25, -1.0]).unwrap());
        s
    }

    #[test]
    fn round_trip_preserves_names_shapes_data() {
        let dir = std::env::temp_dir().join(format!("osty-ckpt-{}", std::process::id()));
        let path = dir.join("ckpt.bin");
        let store = sample_store();
        write_checkpoint(&path, &store).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back.len(), store.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn identical_stores_serialize_identically() {
        let dir = std::env::temp_dir().join(format!("osty-ckpt-det-{}", std::process::id()));
        let p1 = dir.join("a.bin");
        let p2 = dir.join("b.bin");
        write_checkpoint(&p1, &sample_store()).unwrap();
        write_checkpoint(&p2, &sample_store()).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        fs::remove_dir_all(dir).ok();
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join(format!("osty-ckpt-bad-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_checkpoint(&path),
            Err(TensorError::Checkpoint(_))
        ));
        fs::remove_dir_all(dir).ok();
    }
}
