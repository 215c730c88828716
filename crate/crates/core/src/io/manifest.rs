//! Dataset manifests: one CSV row per subject.

use super::{load_masks, load_volume, save_masks, save_volume, VolumeFormat};
use crate::error::{Error, Result};
use crate::phantom::{random_phantom, subject_seed, PhantomSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use crate::volume::{MaskSet, Spacing, Volume};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const FILE_NAME: &str = "manifest.csv";
/// Fallback root for relative manifest paths.
pub const DATA_DIR_ENV: &str = "CALID_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub subject_id: String,
    pub volume_path: String,
    /// Empty when no segmentation is available.
    pub mask_path: String,
    pub split: Split,
    pub in_plane_mm: f64,
    pub slice_mm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest file, or `manifest.csv` inside a directory. When the
    /// path does not exist and is relative, it is retried under
    /// `$CALID_DATA_DIR`.
    pub fn read(path: &Path) -> Result<Self> {
        let mut path = path.to_path_buf();
        if !path.exists() && path.is_relative() {
            if let Ok(root) = std::env::var(DATA_DIR_ENV) {
                path = Path::new(&root).join(&path);
            }
        }
        if path.is_dir() {
            path = path.join(FILE_NAME);
        }
        let mut r = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let entries = r
            .deserialize()
            .collect::<std::result::Result<Vec<Entry>, _>>()
            .map_err(|e| csv_error(&path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_volume(&self, e: &Entry) -> Result<Volume> {
        let path = self.resolve(&e.volume_path);
        let mut v = load_volume(&path, VolumeFormat::from_path(&path)?)?;
        v.subject_id = e.subject_id.clone();
        v.spacing = Spacing {
            in_plane: e.in_plane_mm,
            slice: e.slice_mm,
            ..v.spacing
        };
        Ok(v)
    }

    /// Volumes of one split, with masks where available.
    pub fn load_split(&self, split: Split) -> Result<Vec<(Volume, Option<MaskSet>)>> {
        self.split(split).map(|e| Ok((self.load_volume(e)?, self.load_masks(e)?))).collect()
    }

    pub fn load_masks(&self, e: &Entry) -> Result<Option<MaskSet>> {
        if e.mask_path.is_empty() {
            return Ok(None);
        }
        load_masks(&self.resolve(&e.mask_path)).map(Some)
    }
}

/// Size and layout of a synthetic phantom dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub image_size: usize,
    pub n_slices: usize,
    pub n_frames: usize,
    pub noise_level: f64,
    pub format: VolumeFormat,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train_subjects: 256,
            test_subjects: 32,
            image_size: 64,
            n_slices: 12,
            n_frames: 8,
            noise_level: 0.02,
            format: VolumeFormat::Rawtensor,
        }
    }
}

impl DatasetConfig {
    pub fn subjects(&self) -> usize {
        self.train_subjects + self.test_subjects
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects() == 0 {
            return Err(Error::invalid("dataset needs at least one subject"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        PhantomSpec::random(self.image_size, self.n_slices, self.n_frames, self.noise_level, &mut rng).validate()
    }
}

/// Renders subject `i` of a phantom dataset.
pub fn phantom_subject(config: &DatasetConfig, seed: u64, i: usize) -> Result<(Volume, MaskSet)> {
    let (_, v, m) = random_phantom(config.image_size, config.n_slices, config.n_frames, config.noise_level, subject_seed(seed, i))?;
    Ok((v, m))
}

/// Writes every subject plus its masks under `dir` and returns the manifest
/// (also written to `dir/manifest.csv`). The first `train_subjects` subjects
/// form the training split.
pub fn generate_dataset(config: &DatasetConfig, seed: u64, dir: &Path) -> Result<Manifest> {
    config.validate()?;
    let sub = dir.join("subjects");
    std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
    let written = crate::parallel::map_indices(config.subjects(), |i| -> Result<Entry> {
        let (v, m) = phantom_subject(config, seed, i)?;
        let volume_path = format!("subjects/{}.{}", v.subject_id, config.format.extension());
        let mask_path = format!("subjects/{}_masks.rawt", v.subject_id);
        save_volume(&v, &dir.join(&volume_path), config.format)?;
        save_masks(&m, &dir.join(&mask_path))?;
        Ok(Entry {
            subject_id: v.subject_id.clone(),
            volume_path,
            mask_path,
            split: if i < config.train_subjects { Split::Train } else { Split::Test },
            in_plane_mm: v.spacing.in_plane,
            slice_mm: v.spacing.slice,
        })
    });
    let entries = written.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { root: dir.to_path_buf(), entries };
    manifest.write(&dir.join(FILE_NAME))?;
    Ok(manifest)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e.to_string())
}
