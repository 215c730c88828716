use crate::config::{Extractor, RunConfig, SWEEP_STEPS};
use crate::error::{CliError, Result};
use calid::denoiser::{train_diffusion, Denoiser, DiffusionExtras};
use calid::eval::{collect_cases, evaluate, predict, steps_sweep, EvalCase, EvalConfig, Method};
use calid::interpolator::{upsample_sequence, upsample_stack, CalidModel};
use calid::io::checkpoint::Checkpoint;
use calid::io::manifest::{generate_dataset, Manifest, Split};
use calid::io::{load_volume, prepare_output_dir, save_volume, write_json, VolumeFormat};
use calid::metrics::{FeatureExtractor, GradientPyramid, MetricReport, VaeFeatures};
use calid::nn::Dims;
use calid::plot::{contact_sheet, steps_plot, temporal_strip};
use calid::train::write_loss_csv;
use calid::vae::{train_vae, PerceptualLoss, Vae, VaeTrainExtras};
use calid::volume::Volume;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Per-command options that are not part of the layered configuration.
#[derive(Clone, Debug, Default)]
pub struct Extra {
    pub force: bool,
    pub budget: Option<u64>,
    pub resume: Option<PathBuf>,
    pub perceptual_vae: Option<PathBuf>,
    /// Planar checkpoint used to warm-start a volumetric model.
    pub inflate: Option<PathBuf>,
    pub sweep: bool,
}

/// Creates the output directory and writes the resolved snapshot.
fn start(cfg: &RunConfig, force: bool) -> Result<String> {
    prepare_output_dir(&cfg.out, force)?;
    cfg.write_snapshot(&cfg.out)
}

fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.ok_or_else(|| CliError::Usage(format!("{what} is not set")))?;
    if !p.exists() {
        return Err(CliError::Usage(format!("{what} {} does not exist", p.display())));
    }
    Ok(p.clone())
}

fn load_train(cfg: &RunConfig) -> Result<Vec<Volume>> {
    let manifest = Manifest::read(&cfg.manifest_path()?)?;
    let vols: Vec<Volume> = manifest.load_split(Split::Train)?.into_iter().map(|(v, _)| v).collect();
    if vols.is_empty() {
        return Err(CliError::Usage("the manifest has no training subjects".into()));
    }
    Ok(vols)
}

fn load_resume(extra: &Extra) -> Result<Option<Checkpoint>> {
    Ok(extra.resume.as_deref().map(Checkpoint::load).transpose()?)
}

pub fn phantom_gen(cfg: &RunConfig, extra: &Extra) -> Result<()> {
    cfg.data.phantoms.validate()?;
    let hash = start(cfg, extra.force)?;
    let t = Instant::now();
    let m = generate_dataset(&cfg.data.phantoms, cfg.seed, &cfg.out)?;
    write_json(
        &cfg.out.join("run.json"),
        &json!({
            "command": "phantom-gen",
            "config_hash": hash,
            "subjects": m.entries.len(),
            "train": m.split(Split::Train).count(),
            "test": m.split(Split::Test).count(),
            "seconds": t.elapsed().as_secs_f64(),
        }),
    )?;
    println!("wrote {} subjects to {}", m.entries.len(), cfg.out.display());
    Ok(())
}

pub fn train_vae_cmd(cfg: &RunConfig, extra: &Extra) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(b) = extra.budget {
        cfg.vae.train.steps = b;
    }
    let vols = load_train(&cfg)?;
    let resume = load_resume(extra)?;
    let perceptual = match &extra.perceptual_vae {
        Some(p) => Some(PerceptualLoss::from_vae(&Vae::load(p)?)),
        None => None,
    };
    let hash = start(&cfg, extra.force)?;
    let extras = VaeTrainExtras {
        perceptual: perceptual.as_ref(),
        adversarial: None,
        checkpoint_dir: Some(cfg.out.join("checkpoints")),
        resume,
        init: match &extra.inflate {
            Some(p) => Some(Vae::load(p)?.inflated_params(&cfg.vae.model)?),
            None => None,
        },
    };
    let (vae, report) = train_vae(&vols, &cfg.vae.model, &cfg.vae.data, &cfg.vae.train, extras)?;
    vae.save(&cfg.out.join("vae.ckpt"))?;
    write_loss_csv(&cfg.out.join("vae_loss.csv"), &vae.history)?;
    write_json(
        &cfg.out.join("run.json"),
        &json!({ "command": "train-vae", "config_hash": hash, "report": report, "latent_scale": vae.latent_scale, "checksum": vae.checksum() }),
    )?;
    println!("vae: {} steps, val psnr {:.2} dB, {:.1}s", report.steps, report.final_val_psnr, report.seconds);
    Ok(())
}

pub fn train_diffusion_cmd(cfg: &RunConfig, extra: &Extra) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(b) = extra.budget {
        cfg.diffusion.train.steps = b;
    }
    let vae = Vae::load(&require(cfg.diffusion.vae_checkpoint.as_ref(), "diffusion.vae_checkpoint")?)?;
    let vols = load_train(&cfg)?;
    let resume = load_resume(extra)?;
    let hash = start(&cfg, extra.force)?;
    let extras = DiffusionExtras {
        checkpoint_dir: Some(cfg.out.join("checkpoints")),
        resume,
        init: match &extra.inflate {
            Some(p) => Some(Denoiser::load(p)?.inflated_params(&cfg.diffusion.model)?),
            None => None,
        },
    };
    let (den, report) = train_diffusion(&vols, &vae, &cfg.diffusion.model, &cfg.diffusion.data, &cfg.diffusion.train, extras)?;
    den.save(&cfg.out.join("diffusion.ckpt"))?;
    write_loss_csv(&cfg.out.join("diffusion_loss.csv"), &den.history)?;
    write_json(&cfg.out.join("run.json"), &json!({ "command": "train-diffusion", "config_hash": hash, "report": report }))?;
    println!(
        "diffusion: {} steps, eval loss {:.5} -> {:.5} (ema), {:.1}s",
        report.steps, report.initial_eval_loss, report.final_eval_loss_ema, report.seconds
    );
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<CalidModel> {
    let vae = Vae::load(&require(cfg.inference.vae_checkpoint.as_ref(), "inference.vae_checkpoint")?)?;
    let den = Denoiser::load(&require(cfg.inference.diffusion_checkpoint.as_ref(), "inference.diffusion_checkpoint")?)?;
    if den.config().dims != cfg.diffusion.model.dims {
        return Err(CliError::Usage(format!(
            "checkpoint is {}D but the configuration asks for {}D",
            dims_label(den.config().dims),
            dims_label(cfg.diffusion.model.dims)
        )));
    }
    Ok(CalidModel::new(vae, den)?)
}

fn dims_label(d: Dims) -> &'static str {
    match d {
        Dims::Planar => "2",
        Dims::Volumetric => "3",
    }
}

pub fn upsample(cfg: &RunConfig, extra: &Extra) -> Result<()> {
    let input = require(cfg.inference.input.as_ref(), "inference.input")?;
    let format = VolumeFormat::from_path(&input)?;
    let stack = load_volume(&input, format)?;
    let model = load_model(cfg)?;
    let hash = start(cfg, extra.force)?;
    let sampler = &cfg.inference.sampler;
    let (dense, report) = match model.dims() {
        Dims::Planar => upsample_stack(&stack, &model, sampler)?,
        Dims::Volumetric => upsample_sequence(&stack, &model, sampler)?,
    };
    let out_format = cfg.inference.output_format.unwrap_or(format);
    let out_path = cfg.out.join(format!("upsampled.{}", out_format.extension()));
    save_volume(&dense, &out_path, out_format)?;
    if cfg.inference.contact_sheet {
        let g = dense.grid;
        let images: Vec<&[f32]> = (0..g.slices).map(|z| dense.image(z, 0)).collect();
        contact_sheet(&images, g.height, g.width, 8)?.save(&cfg.out.join("contact_sheet.png"))?;
    }
    write_json(
        &cfg.out.join("upsample.json"),
        &json!({ "command": "upsample", "config_hash": hash, "input": input, "output": out_path, "report": report }),
    )?;
    println!(
        "{} -> {} slices in {:.2}s ({})",
        report.input_slices,
        report.output_slices,
        report.total_seconds,
        out_path.display()
    );
    Ok(())
}

pub fn evaluate_cmd(cfg: &RunConfig, extra: &Extra) -> Result<()> {
    let manifest = Manifest::read(&cfg.manifest_path()?)?;
    let mut test = Vec::new();
    for (v, m) in manifest.load_split(Split::Test)? {
        let m = m.ok_or_else(|| CliError::Usage(format!("test subject {} has no masks", v.subject_id)))?;
        test.push((v, m));
    }
    if let Some(k) = cfg.metrics.max_subjects {
        test.truncate(k);
    }
    if test.is_empty() {
        return Err(CliError::Usage("the manifest has no test subjects".into()));
    }
    let wants_model = cfg.metrics.methods.iter().any(|m| m.needs_model()) || extra.sweep || !cfg.metrics.sweep_steps.is_empty();
    let model = if wants_model && cfg.inference.vae_checkpoint.is_some() && cfg.inference.diffusion_checkpoint.is_some() {
        Some(load_model(cfg)?)
    } else {
        None
    };
    let extractor: Box<dyn FeatureExtractor> = match (cfg.metrics.extractor, &model) {
        (Extractor::Vae, Some(m)) => Box::new(VaeFeatures::new(Arc::new(m.vae.clone()), 4)),
        (Extractor::Vae, None) => return Err(CliError::Usage("the vae feature extractor needs inference.vae_checkpoint".into())),
        (Extractor::GradientPyramid, _) => Box::new(GradientPyramid::default()),
    };
    let cases = collect_cases(&test, &cfg.metrics.frames, cfg.metrics.temporal)?;
    let hash = start(cfg, extra.force)?;
    let ec = EvalConfig {
        methods: cfg.metrics.methods.clone(),
        inference: cfg.inference.sampler.clone(),
        frames: cfg.metrics.frames.clone(),
        temporal: cfg.metrics.temporal,
        lvc_threshold: cfg.metrics.lvc_threshold,
        swap_test: cfg.metrics.swap_test,
        sweep_steps: if extra.sweep && cfg.metrics.sweep_steps.is_empty() { SWEEP_STEPS.to_vec() } else { cfg.metrics.sweep_steps.clone() },
    };
    let mut report = evaluate(&cases, model.as_ref(), &ec, extractor.as_ref())?;
    report.meta.config_hash = hash.clone();
    report.write_csv(&cfg.out.join("metrics.csv"))?;
    report.write_manifest(&cfg.out.join("metrics.json"))?;
    let plots = cfg.out.join("plots");
    if cfg.metrics.plots {
        std::fs::create_dir_all(&plots).map_err(|e| calid::Error::io(&plots, e))?;
        write_case_figures(&cases, model.as_ref(), &ec, &plots)?;
    }
    if !ec.sweep_steps.is_empty() {
        let model = model.as_ref().ok_or_else(|| CliError::Usage("the steps sweep needs trained checkpoints".into()))?;
        let mut sweep = steps_sweep(&cases, model, &ec, cfg.metrics.sweep_mode, extractor.as_ref())?;
        sweep.meta.config_hash = hash;
        sweep.write_csv(&cfg.out.join("sweep.csv"))?;
        sweep.write_manifest(&cfg.out.join("sweep.json"))?;
        if cfg.metrics.plots {
            write_sweep_plots(&sweep, &ec.sweep_steps, &plots)?;
        }
    }
    for a in report.aggregate() {
        println!("{:16} {:22} {:>12.4} ± {:.4} (n={})", a.method, a.metric, a.mean, a.std, a.count);
    }
    Ok(())
}

/// Contact sheet of the first cases (prev, truth, next, then every method)
/// and, for temporal cases, cross-section strips through the middle row.
fn write_case_figures(cases: &[EvalCase], model: Option<&CalidModel>, ec: &EvalConfig, dir: &Path) -> Result<()> {
    let shown = &cases[..cases.len().min(4)];
    let methods: Vec<Method> = ec.methods.iter().copied().filter(|m| !m.needs_model() || model.is_some()).collect();
    let preds = methods
        .iter()
        .map(|&m| predict(m, shown, model, &ec.inference))
        .collect::<calid::Result<Vec<_>>>()?;
    let [d, h, w] = shown[0].shape;
    let plane = h * w;
    let mut tiles: Vec<&[f32]> = Vec::new();
    for (i, c) in shown.iter().enumerate() {
        tiles.extend([&c.prev[..plane], &c.target[..plane], &c.next[..plane]]);
        tiles.extend(preds.iter().map(|p| &p[i][..plane]));
    }
    contact_sheet(&tiles, h, w, 3 + methods.len())?.save(&dir.join("cases.png"))?;
    if d > 1 {
        let mut strips = vec![temporal_strip(&shown[0].target, d, h, w, h / 2)?];
        for p in &preds {
            strips.push(temporal_strip(&p[0], d, h, w, h / 2)?);
        }
        let refs: Vec<&[f32]> = strips.iter().map(Vec::as_slice).collect();
        contact_sheet(&refs, d, w, refs.len())?.save(&dir.join("temporal_strips.png"))?;
    }
    Ok(())
}

fn write_sweep_plots(sweep: &MetricReport, steps: &[usize], dir: &Path) -> Result<()> {
    let agg = sweep.aggregate();
    for metric in ["psnr", "ssim", "perceptual"] {
        let series: Vec<(usize, f64)> = steps
            .iter()
            .filter_map(|&k| {
                agg.iter()
                    .find(|a| a.metric == metric && a.method.ends_with(&format!("_s{k}")))
                    .map(|a| (k, a.mean))
            })
            .collect();
        if !series.is_empty() {
            steps_plot(&[(metric.to_owned(), series)], 480, 320)?.save(&dir.join(format!("steps_{metric}.png")))?;
        }
    }
    Ok(())
}
