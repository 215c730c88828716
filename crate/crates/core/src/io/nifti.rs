//! Single-file NIfTI-1 (`.nii`, uncompressed) reading and writing.
//!
//! Axes map as x = column, y = row, z = slice, t = frame; voxel sizes live in
//! `pixdim[1..=4]`.

use crate::error::{Error, Result};
use crate::volume::{Grid, Spacing, Volume};
use std::path::Path;

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

struct Reader<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }

    fn f64(&self, off: usize) -> f64 {
        let b: [u8; 8] = self.bytes[off..off + 8].try_into().unwrap();
        if self.big_endian {
            f64::from_be_bytes(b)
        } else {
            f64::from_le_bytes(b)
        }
    }
}

pub fn read(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Volume> {
    let err = |msg: String| Error::parse(path, msg);
    if bytes.len() < HEADER_SIZE {
        return Err(err("file shorter than a NIfTI-1 header".into()));
    }
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let big_endian = match (le, be) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(err(format!("sizeof_hdr is {le}, expected 348"))),
    };
    if &bytes[344..348] != MAGIC {
        return Err(err(format!("bad magic {:?}, expected single-file n+1", &bytes[344..348])));
    }
    let r = Reader { bytes, big_endian };
    let rank = r.i16(40);
    if !(3..=4).contains(&rank) {
        return Err(err(format!("expected a 3D or 4D image, dim[0] = {rank}")));
    }
    let dim = |i: usize| r.i16(40 + 2 * i);
    let (w, h, z) = (dim(1), dim(2), dim(3));
    let t = if rank == 4 { dim(4) } else { 1 };
    if [w, h, z, t].iter().any(|&d| d < 1) {
        return Err(err(format!("non-positive dimension in {:?}", [w, h, z, t])));
    }
    let (w, h, z, t) = (w as usize, h as usize, z as usize, t as usize);
    let datatype = r.i16(70);
    let size = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(err(format!("unsupported datatype code {other}"))),
    };
    let offset = r.f32(108);
    if !(offset >= VOX_OFFSET as f32) {
        return Err(err(format!("vox_offset {offset} precedes the end of the header")));
    }
    let offset = offset as usize;
    let n = w * h * z * t;
    if bytes.len() < offset + n * size {
        return Err(err(format!(
            "dimensions {:?} need {} data bytes, file has {}",
            [w, h, z, t],
            n * size,
            bytes.len().saturating_sub(offset)
        )));
    }
    let (slope, inter) = (r.f32(112), r.f32(116));
    let scale = |v: f64| if slope != 0.0 && slope.is_finite() { v * slope as f64 + inter as f64 } else { v };
    let raw: Vec<f32> = (0..n)
        .map(|i| {
            let o = offset + i * size;
            let v = match datatype {
                DT_UINT8 => bytes[o] as f64,
                DT_INT16 => r.i16(o) as f64,
                DT_FLOAT32 => r.f32(o) as f64,
                _ => r.f64(o),
            };
            scale(v) as f32
        })
        .collect();
    // File order is [t][z][y][x]; volumes are stored [z][t][y][x].
    let plane = w * h;
    let mut voxels = vec![0f32; n];
    for tt in 0..t {
        for zz in 0..z {
            let src = (tt * z + zz) * plane;
            let dst = (zz * t + tt) * plane;
            voxels[dst..dst + plane].copy_from_slice(&raw[src..src + plane]);
        }
    }
    // Shortest decimal form of the stored float32, so 1.8 reads back as 1.8.
    let pix = |i: usize| r.f32(76 + 4 * i).abs().to_string().parse::<f64>().unwrap_or(0.0);
    let positive = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
    let spacing = Spacing {
        in_plane: positive(pix(1)),
        slice: positive(pix(3)),
        frame: if rank == 4 { positive(pix(4)) } else { 1.0 },
    };
    let grid = Grid {
        slices: z,
        frames: (rank == 4 && t > 1).then_some(t),
        height: h,
        width: w,
    };
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    let id = id.strip_suffix(".nii").unwrap_or(id);
    Volume::new(voxels, grid, spacing, id)
}

/// Writes `volume` as little-endian float32.
pub fn write(volume: &Volume, path: &Path) -> Result<()> {
    std::fs::write(path, encode(volume)?).map_err(|e| Error::io(path, e))
}

pub fn encode(volume: &Volume) -> Result<Vec<u8>> {
    let g = volume.grid;
    let t = g.frame_count();
    if [g.width, g.height, g.slices, t].iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::invalid("volume too large for NIfTI-1"));
    }
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut Vec<u8>, off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut Vec<u8>, off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let rank: i16 = if g.frames.is_some() { 4 } else { 3 };
    let dims = [rank, g.width as i16, g.height as i16, g.slices as i16, t as i16, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * i, *d);
    }
    put_i16(&mut h, 70, DT_FLOAT32);
    put_i16(&mut h, 72, 32);
    let s = volume.spacing;
    let pixdim = [1.0, s.in_plane, s.in_plane, s.slice, s.frame, 1.0, 1.0, 1.0];
    for (i, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * i, *p as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    let desc = format!("calid {}", volume.subject_id);
    let n = desc.len().min(79);
    h[148..148 + n].copy_from_slice(&desc.as_bytes()[..n]);
    put_i16(&mut h, 254, 1);
    put_f32(&mut h, 280, s.in_plane as f32);
    put_f32(&mut h, 296 + 4, s.in_plane as f32);
    put_f32(&mut h, 312 + 8, s.slice as f32);
    h[344..348].copy_from_slice(MAGIC);
    let plane = g.plane();
    h.reserve(g.len() * 4);
    for tt in 0..t {
        for zz in 0..g.slices {
            let o = g.offset(zz, tt);
            for v in &volume.voxels[o..o + plane] {
                h.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume(frames: Option<usize>) -> Volume {
        let grid = Grid {
            slices: 3,
            frames,
            height: 4,
            width: 5,
        };
        let vox = (0..grid.len()).map(|i| i as f32 / grid.len() as f32).collect();
        let spacing = Spacing {
            in_plane: 1.25,
            slice: 8.0,
            frame: 0.5,
        };
        Volume::new(vox, grid, spacing, "v").unwrap()
    }

    #[test]
    fn round_trip_preserves_voxels_and_spacing() {
        for frames in [None, Some(2)] {
            let v = volume(frames);
            let back = decode(&encode(&v).unwrap(), Path::new("v.nii")).unwrap();
            assert_eq!(back.voxels, v.voxels);
            assert_eq!(back.grid, v.grid);
            assert_eq!(back.spacing.in_plane, 1.25);
            assert_eq!(back.spacing.slice, 8.0);
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode(&volume(None)).unwrap();
        bytes[345] = b'i';
        let e = decode(&bytes, Path::new("x.nii")).unwrap_err();
        assert!(e.to_string().contains("magic"));
    }

    #[test]
    fn big_endian_int16_is_read() {
        let mut h = vec![0u8; VOX_OFFSET];
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        for (i, d) in [3i16, 2, 2, 1, 1, 1, 1, 1].iter().enumerate() {
            h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_be_bytes());
        }
        h[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        h[108..112].copy_from_slice(&352f32.to_be_bytes());
        h[344..348].copy_from_slice(MAGIC);
        for v in [1i16, -2, 300, 4] {
            h.extend_from_slice(&v.to_be_bytes());
        }
        let v = decode(&h, Path::new("be.nii")).unwrap();
        assert_eq!(v.voxels, vec![1.0, -2.0, 300.0, 4.0]);
    }
}
