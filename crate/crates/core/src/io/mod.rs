//! On-disk formats: rawtensor, NIfTI-1, checkpoints and dataset manifests.

pub mod checkpoint;
pub mod manifest;
pub mod nifti;
pub mod rawtensor;

use crate::error::{Error, Result};
use crate::volume::{Grid, MaskSet, Spacing, Volume};
use rawtensor::{RawData, RawTensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeFormat {
    Nifti1,
    Rawtensor,
}

impl VolumeFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path.to_string_lossy();
        if name.ends_with(".nii") {
            Ok(Self::Nifti1)
        } else if name.ends_with(".rawt") || name.ends_with(".raw") {
            Ok(Self::Rawtensor)
        } else {
            Err(Error::invalid(format!("cannot infer volume format of {}", path.display())))
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Nifti1 => "nii",
            Self::Rawtensor => "rawt",
        }
    }
}

impl std::str::FromStr for VolumeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nifti1" | "nifti" | "nii" => Ok(Self::Nifti1),
            "rawtensor" | "rawt" => Ok(Self::Rawtensor),
            _ => Err(Error::invalid(format!("unknown volume format {s:?}"))),
        }
    }
}

/// Loads a volume. Rawtensor files carry no spacing, so the default spacing
/// is assumed (manifests supply the real one).
pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<Volume> {
    match format {
        VolumeFormat::Nifti1 => nifti::read(path),
        VolumeFormat::Rawtensor => {
            let t = RawTensor::load(path)?;
            let grid = Grid::from_shape(&t.dims).map_err(|e| Error::parse(path, e.to_string()))?;
            let voxels = match t.data {
                RawData::F32(v) => v,
                other => other.to_f32(),
            };
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
            Volume::new(voxels, grid, Spacing::default(), id)
        }
    }
}

pub fn save_volume(volume: &Volume, path: &Path, format: VolumeFormat) -> Result<()> {
    match format {
        VolumeFormat::Nifti1 => nifti::write(volume, path),
        VolumeFormat::Rawtensor => {
            RawTensor::new(volume.grid.shape(), RawData::F32(volume.voxels.clone()))?.save(path)
        }
    }
}

/// Masks are stored as one `u8` rawtensor with a leading class axis
/// (LVC, LVM, RVC).
pub fn save_masks(masks: &MaskSet, path: &Path) -> Result<()> {
    let mut dims = vec![3];
    dims.extend(masks.grid.shape());
    let data = [&masks.lvc, &masks.lvm, &masks.rvc]
        .iter()
        .flat_map(|m| m.iter().map(|&b| b as u8))
        .collect();
    RawTensor::new(dims, RawData::U8(data))?.save(path)
}

pub fn load_masks(path: &Path) -> Result<MaskSet> {
    let t = RawTensor::load(path)?;
    let RawData::U8(data) = t.data else {
        return Err(Error::parse(path, "mask file must hold u8 data"));
    };
    if t.dims.first() != Some(&3) {
        return Err(Error::parse(path, format!("mask file must have a leading axis of 3, got {:?}", t.dims)));
    }
    let grid = Grid::from_shape(&t.dims[1..]).map_err(|e| Error::parse(path, e.to_string()))?;
    let n = grid.len();
    let class = |k: usize| data[k * n..(k + 1) * n].iter().map(|&b| b != 0).collect();
    Ok(MaskSet {
        grid,
        lvc: class(0),
        lvm: class(1),
        rvc: class(2),
    })
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::invalid(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::random_phantom;

    #[test]
    fn volume_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, v, m) = random_phantom(16, 3, 2, 0.05, 4).unwrap();
        let p = dir.path().join("v.rawt");
        save_volume(&v, &p, VolumeFormat::Rawtensor).unwrap();
        let back = load_volume(&p, VolumeFormat::Rawtensor).unwrap();
        assert_eq!(back.voxels, v.voxels);
        assert_eq!(back.grid, v.grid);
        let mp = dir.path().join("m.rawt");
        save_masks(&m, &mp).unwrap();
        assert_eq!(load_masks(&mp).unwrap(), m);
        let np = dir.path().join("v.nii");
        save_volume(&v, &np, VolumeFormat::Nifti1).unwrap();
        let nb = load_volume(&np, VolumeFormat::Nifti1).unwrap();
        assert_eq!(nb.voxels, v.voxels);
        assert_eq!(nb.spacing, v.spacing);
    }

    #[test]
    fn output_dir_guard() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("x"), "1").unwrap();
        assert!(prepare_output_dir(dir.path(), false).is_err());
        prepare_output_dir(dir.path(), true).unwrap();
        prepare_output_dir(&dir.path().join("fresh"), false).unwrap();
    }
}
