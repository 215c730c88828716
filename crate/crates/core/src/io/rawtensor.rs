//! The rawtensor interchange format: a 64-byte ASCII header followed by a
//! little-endian row-major payload.
//!
//! Header layout: `CALIDTEN <dtype> <rank> <d0>x<d1>x...`, space padded and
//! terminated by `\n` at byte 63.

use crate::error::{Error, Result};
use std::path::Path;

pub const MAGIC: &str = "CALIDTEN";
pub const HEADER_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
    U32,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
            Self::U8 => "u8",
            Self::U32 => "u32",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F32 | Self::U32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "f32" => Self::F32,
            "f64" => Self::F64,
            "u8" => Self::U8,
            "u32" => Self::U32,
            _ => return None,
        })
    }
}

/// Typed payload of a rawtensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum RawData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl RawData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::F32(_) => DType::F32,
            Self::F64(_) => DType::F64,
            Self::U8(_) => DType::U8,
            Self::U32(_) => DType::U32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Converts any numeric payload to `f32`.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Self::F32(v) => v.clone(),
            Self::F64(v) => v.iter().map(|&x| x as f32).collect(),
            Self::U8(v) => v.iter().map(|&x| x as f32).collect(),
            Self::U32(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Self::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Self::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Self::U8(v) => v.clone(),
            Self::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: RawData,
}

impl RawTensor {
    pub fn new(dims: Vec<usize>, data: RawData) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                expected: dims,
                got: vec![data.len()],
            });
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let dims = self.dims.iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        let mut header = format!("{MAGIC} {} {} {dims}", self.data.dtype().name(), self.dims.len());
        if header.len() > HEADER_LEN - 1 {
            return Err(Error::invalid(format!("rawtensor header too long for dims {:?}", self.dims)));
        }
        while header.len() < HEADER_LEN - 1 {
            header.push(' ');
        }
        header.push('\n');
        let mut out = header.into_bytes();
        out.extend(self.data.bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |msg: String| Error::parse(origin, msg);
        if bytes.len() < HEADER_LEN {
            return Err(err("file shorter than the rawtensor header".into()));
        }
        let header = std::str::from_utf8(&bytes[..HEADER_LEN]).map_err(|_| err("header is not ASCII".into()))?;
        if !header.ends_with('\n') {
            return Err(err("header is not newline terminated".into()));
        }
        let mut parts = header.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(err(format!("bad magic, expected {MAGIC}")));
        }
        let dtype = parts
            .next()
            .and_then(DType::parse)
            .ok_or_else(|| err("unknown dtype".into()))?;
        let rank: usize = parts
            .next()
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| err("missing rank".into()))?;
        let dims: Vec<usize> = match parts.next() {
            Some(d) if rank > 0 => d
                .split('x')
                .map(|x| x.parse().map_err(|_| err(format!("bad dimension {x:?}"))))
                .collect::<Result<_>>()?,
            None if rank == 0 => Vec::new(),
            _ => return Err(err("missing dims".into())),
        };
        if dims.len() != rank {
            return Err(err(format!("rank {rank} does not match dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != n * dtype.size() {
            return Err(err(format!(
                "payload has {} bytes, dims {dims:?} of {} need {}",
                payload.len(),
                dtype.name(),
                n * dtype.size()
            )));
        }
        let data = match dtype {
            DType::F32 => RawData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => RawData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => RawData::U8(payload.to_vec()),
            DType::U32 => RawData::U32(payload.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_dtypes() {
        let cases = [
            RawTensor::new(vec![2, 3], RawData::F32(vec![0.1, -2.0, f32::MIN_POSITIVE, 4.0, 5.5, -0.0])).unwrap(),
            RawTensor::new(vec![3], RawData::F64(vec![1e-300, -7.25, std::f64::consts::PI])).unwrap(),
            RawTensor::new(vec![2, 1, 2], RawData::U8(vec![0, 1, 254, 255])).unwrap(),
            RawTensor::new(vec![1], RawData::U32(vec![u32::MAX])).unwrap(),
            RawTensor::new(vec![], RawData::F32(vec![3.0])).unwrap(),
        ];
        for t in cases {
            let bytes = t.encode().unwrap();
            assert_eq!(&bytes[..8], b"CALIDTEN");
            assert_eq!(bytes[63], b'\n');
            assert_eq!(RawTensor::decode(&bytes, Path::new("x")).unwrap(), t);
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let t = RawTensor::new(vec![2], RawData::U8(vec![1, 2])).unwrap();
        let mut bytes = t.encode().unwrap();
        bytes.pop();
        assert!(RawTensor::decode(&bytes, Path::new("x")).is_err());
        let mut bad = t.encode().unwrap();
        bad[0] = b'X';
        assert!(RawTensor::decode(&bad, Path::new("x")).is_err());
    }
}
