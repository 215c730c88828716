//! Layered run configuration: built-in defaults, then an optional TOML file,
//! then command-line overrides. The resolved result is written next to every
//! run's outputs.

use crate::error::{CliError, Result};
use calid::denoiser::{DenoiserConfig, DiffusionData};
use calid::eval::Method;
use calid::interpolator::{InferenceConfig, Mode};
use calid::io::manifest::{DatasetConfig, DATA_DIR_ENV};
use calid::io::VolumeFormat;
use calid::nn::Dims;
use calid::phantom::CAVITY_THRESHOLD;
use calid::train::TrainSettings;
use calid::vae::{VaeConfig, VaeData};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const SNAPSHOT: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds every random stream of the run.
    pub seed: u64,
    pub out: PathBuf,
    pub device: String,
    pub data: DataSection,
    pub vae: VaeSection,
    pub diffusion: DiffusionSection,
    pub inference: InferenceSection,
    pub metrics: MetricsSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset manifest (file or directory) for training and evaluation.
    pub manifest: Option<PathBuf>,
    pub phantoms: DatasetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub model: VaeConfig,
    pub train: TrainSettings,
    pub data: VaeData,
}

impl Default for VaeSection {
    fn default() -> Self {
        Self {
            model: VaeConfig::default(),
            train: TrainSettings {
                steps: 800,
                batch_size: 8,
                lr: 2e-3,
                warmup_steps: 50,
                checkpoint_every: 200,
                ..Default::default()
            },
            data: VaeData::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub vae_checkpoint: Option<PathBuf>,
    pub model: DenoiserConfig,
    pub train: TrainSettings,
    pub data: DiffusionData,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            vae_checkpoint: None,
            model: DenoiserConfig::default(),
            train: TrainSettings {
                steps: 8000,
                batch_size: 16,
                lr: 5e-4,
                warmup_steps: 200,
                checkpoint_every: 500,
                ..Default::default()
            },
            data: DiffusionData::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub vae_checkpoint: Option<PathBuf>,
    pub diffusion_checkpoint: Option<PathBuf>,
    /// Sparse stack to upsample.
    pub input: Option<PathBuf>,
    /// Output format; defaults to the input's.
    pub output_format: Option<VolumeFormat>,
    pub contact_sheet: bool,
    pub sampler: InferenceConfig,
}

impl Default for InferenceSection {
    fn default() -> Self {
        Self {
            vae_checkpoint: None,
            diffusion_checkpoint: None,
            input: None,
            output_format: None,
            contact_sheet: true,
            sampler: InferenceConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extractor {
    GradientPyramid,
    Vae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub methods: Vec<Method>,
    pub frames: Vec<usize>,
    /// Score 2D+T blocks (set automatically for `--dims 3`).
    pub temporal: bool,
    pub lvc_threshold: f32,
    pub swap_test: bool,
    /// DDIM step counts for the sweep; empty disables it.
    pub sweep_steps: Vec<usize>,
    pub sweep_mode: Mode,
    pub extractor: Extractor,
    /// Evaluate only the first this many test subjects.
    pub max_subjects: Option<usize>,
    pub plots: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            frames: vec![0],
            temporal: false,
            lvc_threshold: CAVITY_THRESHOLD,
            swap_test: false,
            sweep_steps: Vec::new(),
            sweep_mode: Mode::Calid,
            extractor: Extractor::GradientPyramid,
            max_subjects: None,
            plots: true,
        }
    }
}

pub const SWEEP_STEPS: [usize; 7] = [2, 4, 8, 16, 32, 64, 128];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            device: "cpu".into(),
            data: DataSection::default(),
            vae: VaeSection::default(),
            diffusion: DiffusionSection::default(),
            inference: InferenceSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub device: Option<String>,
    pub mode: Option<Mode>,
    pub steps: Option<usize>,
    pub depth: Option<usize>,
    pub dims: Option<Dims>,
}

fn config_error(path: &Path, msg: impl ToString) -> CliError {
    CliError::Config {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

impl RunConfig {
    /// Defaults, overlaid with `file` when given.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let Some(path) = file else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
        toml::from_str(&text).map_err(|e| config_error(path, e))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(d) = &o.device {
            self.device = d.clone();
        }
        if let Some(m) = o.mode {
            self.inference.sampler.mode = m;
        }
        if let Some(k) = o.steps {
            self.inference.sampler.ddim_steps = k;
        }
        if let Some(d) = o.depth {
            self.inference.sampler.depth = d;
        }
        if let Some(d) = o.dims {
            self.vae.model.dims = d;
            self.diffusion.model.dims = d;
            self.diffusion.data.items.temporal = d == Dims::Volumetric;
            self.metrics.temporal = d == Dims::Volumetric;
        }
        // One seed drives every stream so a snapshot fully pins a run.
        self.vae.train.seed = self.seed;
        self.diffusion.train.seed = self.seed;
        self.inference.sampler.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.device.as_str(), "cpu" | "auto") {
            return Err(CliError::Usage(format!(
                "device {:?} is not available; this build runs on the CPU (use \"cpu\" or \"auto\")",
                self.device
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Usage("seed must fit in a signed 64-bit integer".into()));
        }
        Ok(())
    }

    /// The dataset manifest, falling back to `$CALID_DATA_DIR`.
    pub fn manifest_path(&self) -> Result<PathBuf> {
        self.data
            .manifest
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| CliError::Usage(format!("no dataset: set data.manifest, pass --data or export {DATA_DIR_ENV}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialise configuration: {e}")))
    }

    /// Writes the snapshot into `dir` and returns its SHA-256.
    pub fn write_snapshot(&self, dir: &Path) -> Result<String> {
        let text = self.to_toml()?;
        let path = dir.join(SNAPSHOT);
        std::fs::write(&path, &text).map_err(|e| calid::Error::io(&path, e))?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            mode: Some(Mode::CalidPlus),
            dims: Some(Dims::Volumetric),
            ..Default::default()
        });
        cfg.inference.sampler.invert_steps = Some(4);
        let text = cfg.to_toml().unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn file_layers_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[vae.train]\nsteps = 5\n").unwrap();
        let cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.vae.train.steps, 5);
        assert_eq!(cfg.vae.train.batch_size, RunConfig::default().vae.train.batch_size);
        std::fs::write(&p, "sed = 3\n").unwrap();
        assert_eq!(RunConfig::load(Some(&p)).unwrap_err().exit_code(), 1);
    }
}
