//! `calid`: phantom generation, training, upsampling and evaluation.

mod commands;
mod config;
mod error;

use clap::{Args, Parser, Subcommand, ValueEnum};
use commands::Extra;
use config::{Overrides, RunConfig};
use error::{CliError, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "calid", version, about = "Latent diffusion slice interpolation for sparse short-axis stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    device: Option<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Training steps (0 writes the initialised checkpoint).
    #[arg(long, global = true)]
    budget: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// DDIM sampling steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Bisection depth.
    #[arg(long, global = true)]
    depth: Option<usize>,
    /// 2 for per-frame models, 3 for 2D+T models.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(2..=3))]
    dims: Option<u8>,
    /// Dataset manifest (file or directory).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    Calid,
    CalidPlus,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic phantom dataset with a manifest.
    PhantomGen,
    /// Train the autoencoder.
    TrainVae {
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Frozen autoencoder whose encoder features drive the perceptual loss.
        #[arg(long)]
        perceptual_vae: Option<PathBuf>,
        /// Warm-start a 2D+T autoencoder from this per-frame checkpoint.
        #[arg(long)]
        inflate: Option<PathBuf>,
    },
    /// Train the conditional latent denoiser.
    TrainDiffusion {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Warm-start a 2D+T denoiser from this per-frame checkpoint.
        #[arg(long)]
        inflate: Option<PathBuf>,
    },
    /// Upsample a sparse stack through the slice direction.
    Upsample {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        diffusion: Option<PathBuf>,
    },
    /// Hidden-slice evaluation against baselines.
    Evaluate {
        #[arg(long)]
        vae: Option<PathBuf>,
        #[arg(long)]
        diffusion: Option<PathBuf>,
        /// Also sweep the DDIM step count over 2..128.
        #[arg(long)]
        sweep: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(d) = &g.data {
        cfg.data.manifest = Some(d.clone());
    }
    let mut extra = Extra {
        force: g.force,
        budget: g.budget,
        ..Default::default()
    };
    match &cli.command {
        Command::TrainVae { resume, perceptual_vae, inflate } => {
            extra.resume = resume.clone();
            extra.perceptual_vae = perceptual_vae.clone();
            extra.inflate = inflate.clone();
        }
        Command::TrainDiffusion { vae, resume, inflate } => {
            extra.resume = resume.clone();
            extra.inflate = inflate.clone();
            if vae.is_some() {
                cfg.diffusion.vae_checkpoint = vae.clone();
            }
        }
        Command::Upsample { input, vae, diffusion } => {
            cfg.inference.input = input.clone().or(cfg.inference.input);
            cfg.inference.vae_checkpoint = vae.clone().or(cfg.inference.vae_checkpoint);
            cfg.inference.diffusion_checkpoint = diffusion.clone().or(cfg.inference.diffusion_checkpoint);
        }
        Command::Evaluate { vae, diffusion, sweep } => {
            cfg.inference.vae_checkpoint = vae.clone().or(cfg.inference.vae_checkpoint);
            cfg.inference.diffusion_checkpoint = diffusion.clone().or(cfg.inference.diffusion_checkpoint);
            extra.sweep = *sweep;
        }
        Command::PhantomGen => {}
    }
    cfg.apply(&Overrides {
        seed: g.seed,
        out: g.out.clone(),
        device: g.device.clone(),
        mode: g.mode.map(|m| match m {
            ModeArg::Calid => calid::interpolator::Mode::Calid,
            ModeArg::CalidPlus => calid::interpolator::Mode::CalidPlus,
        }),
        steps: g.steps,
        depth: g.depth,
        dims: g.dims.map(|d| if d == 3 { calid::nn::Dims::Volumetric } else { calid::nn::Dims::Planar }),
    });
    cfg.validate()?;
    if g.budget.is_some() && !matches!(cli.command, Command::TrainVae { .. } | Command::TrainDiffusion { .. }) {
        return Err(CliError::Usage("--budget only applies to training commands".into()));
    }
    match cli.command {
        Command::PhantomGen => commands::phantom_gen(&cfg, &extra),
        Command::TrainVae { .. } => commands::train_vae_cmd(&cfg, &extra),
        Command::TrainDiffusion { .. } => commands::train_diffusion_cmd(&cfg, &extra),
        Command::Upsample { .. } => commands::upsample(&cfg, &extra),
        Command::Evaluate { .. } => commands::evaluate_cmd(&cfg, &extra),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
