//! Checkpoint container: a JSON header followed by named rawtensor blobs.
//!
//! Layout: `CALIDCKP`, `u64` header length, UTF-8 JSON header, `u32` entry
//! count, then per entry `u32` name length, name, `u64` blob length and a
//! rawtensor blob. Integers are little-endian.

use super::rawtensor::{RawData, RawTensor};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CALIDCKP";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, RawTensor)>,
}

impl Checkpoint {
    pub fn new(header: serde_json::Value) -> Self {
        Self {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: RawTensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Adds every parameter of `store` under `prefix`.
    pub fn push_store<S: Real>(&mut self, prefix: &str, store: &ParamStore<S>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), tensor_to_raw(t));
        }
    }

    /// Fills `store` from the entries under `prefix`; every parameter must be
    /// present with a matching shape.
    pub fn load_store<S: Real>(&self, prefix: &str, store: &mut ParamStore<S>) -> Result<()> {
        let entries = self
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|n| (n, raw_to_tensor::<S>(t))));
        store
            .load_from(entries)
            .map_err(|msg| Error::Contract(format!("checkpoint section {prefix:?}: {msg}")))
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let blob = t.encode()?;
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(8)? != MAGIC {
            return Err(Error::parse(path, "not a checkpoint (bad magic)"));
        }
        let hlen = cur.u64()? as usize;
        let header = serde_json::from_slice(cur.take(hlen)?).map_err(|e| Error::parse(path, e.to_string()))?;
        let count = cur.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let nlen = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(nlen)?.to_vec()).map_err(|_| Error::parse(path, "tensor name is not UTF-8"))?;
            let blen = cur.u64()? as usize;
            tensors.push((name, RawTensor::decode(cur.take(blen)?, path)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::parse(path, "trailing bytes after the last entry"));
        }
        Ok(Self { header, tensors })
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.path, "checkpoint truncated"));
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
}

pub fn tensor_to_raw<S: Real>(t: &Tensor<S>) -> RawTensor {
    let data = if S::DTYPE == "f64" {
        RawData::F64(t.to_f64_vec())
    } else {
        RawData::F32(t.data().iter().map(|x| x.f() as f32).collect())
    };
    RawTensor {
        dims: t.shape().to_vec(),
        data,
    }
}

pub fn raw_to_tensor<S: Real>(t: &RawTensor) -> Tensor<S> {
    let data = match &t.data {
        RawData::F64(v) => v.iter().map(|&x| S::of(x)).collect(),
        other => other.to_f32().into_iter().map(|x| S::of(x as f64)).collect(),
    };
    Tensor::from_vec(&t.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let mut ps = ParamStore::<f32>::new();
        ps.add("a.weight", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 0.25]));
        ps.add("a.bias", Tensor::from_vec(&[2], vec![0.0, 1e-7]));
        let mut ck = Checkpoint::new(serde_json::json!({"step": 3}));
        ck.push_store("model.", &ps);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, ck);
        let mut other = ParamStore::<f32>::new();
        other.add("a.weight", Tensor::zeros(&[2, 2]));
        other.add("a.bias", Tensor::zeros(&[2]));
        back.load_store("model.", &mut other).unwrap();
        assert_eq!(other.checksum(), ps.checksum());
        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a.weight", Tensor::zeros(&[3, 2]));
        assert!(back.load_store("model.", &mut wrong).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
    }
}
