//! Convolutional variational autoencoder defining the latent space.
//!
//! The encoder halves the in-plane resolution `log2(f)` times and predicts a
//! diagonal Gaussian posterior; the decoder mirrors it. There is no
//! attention. With [`Dims::Volumetric`] every convolution also spans the
//! temporal axis, which keeps its full resolution.

use crate::error::{check_shape, Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::nn::{inflate_planar, Inflation, Builder, Conv, Dims, Downsample, GroupNorm, Init, ResBlock, Upsample};
use crate::tensor::optim::{Adam, WarmupSchedule};
use crate::tensor::{Ctx, ParamStore, Real, Tape, Tensor, Var};
use crate::train::{clip_factor, step_rng, LossRecord, TrainSettings};
use crate::volume::{batch_tensor, extract_block, uniform_frames, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub dims: Dims,
    /// Spatial downsampling factor.
    pub f: usize,
    pub in_channels: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    /// Channel multiplier per resolution; `log2(f) + 1` entries.
    pub channel_mults: Vec<usize>,
    pub kl_weight: f64,
    pub use_perceptual: bool,
    pub perceptual_weight: f64,
    pub use_adversarial: bool,
    pub adversarial_weight: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            dims: Dims::Planar,
            f: 4,
            in_channels: 1,
            latent_channels: 4,
            base_channels: 16,
            channel_mults: vec![1, 2, 2],
            kl_weight: 1e-6,
            use_perceptual: false,
            perceptual_weight: 0.1,
            use_adversarial: false,
            adversarial_weight: 0.1,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f == 0 || !self.f.is_power_of_two() {
            return Err(Error::invalid(format!("downsampling factor must be a power of two, got {}", self.f)));
        }
        let levels = self.f.trailing_zeros() as usize + 1;
        if self.channel_mults.len() != levels {
            return Err(Error::invalid(format!(
                "f = {} needs {levels} channel multipliers, got {:?}",
                self.f, self.channel_mults
            )));
        }
        if self.latent_channels == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.channel_mults.contains(&0) {
            return Err(Error::invalid("channel multipliers must be positive"));
        }
        if !(self.kl_weight > 0.0) {
            return Err(Error::invalid(format!("kl_weight must be positive, got {}", self.kl_weight)));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }
}

/// Posterior `N(mu, exp(logvar))`, both `[B, C, D, H/f, W/f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    pub mu: Tensor<f32>,
    pub logvar: Tensor<f32>,
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`.
pub fn reparameterize<R: Rng>(dist: &LatentDistribution, rng: &mut R) -> Result<Tensor<f32>> {
    check_shape(dist.mu.shape(), dist.logvar.shape())?;
    let mut z = dist.mu.clone();
    for (v, lv) in z.data_mut().iter_mut().zip(dist.logvar.data()) {
        let e: f64 = rng.sample(StandardNormal);
        let lv = (*lv as f64).clamp(LOGVAR_MIN, LOGVAR_MAX);
        *v = (*v as f64 + (0.5 * lv).exp() * e) as f32;
    }
    Ok(z)
}

/// Closed-form `KL(N(mu, exp(logvar)) || N(0, I))` summed over elements.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Loss terms of one batch.
pub struct ElboTerms<'t, S: Real> {
    /// Mean squared reconstruction error per pixel.
    pub recon: Var<'t, S>,
    /// KL divergence summed over latent elements, averaged over the batch.
    pub kl: Var<'t, S>,
    pub total: Var<'t, S>,
}

/// Network structure; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct VaeNet {
    pub config: VaeConfig,
    enc_in: Conv,
    enc_blocks: Vec<ResBlock>,
    enc_down: Vec<Downsample>,
    enc_mid: ResBlock,
    enc_norm: GroupNorm,
    enc_out: Conv,
    dec_in: Conv,
    dec_mid: ResBlock,
    dec_blocks: Vec<ResBlock>,
    dec_up: Vec<Upsample>,
    dec_norm: GroupNorm,
    dec_out: Conv,
}

impl VaeNet {
    pub fn build<S: Real, R: Rng>(config: &VaeConfig, bd: &mut Builder<'_, S, R>) -> Result<Self> {
        config.validate()?;
        let d = config.dims;
        let levels = config.channel_mults.len();
        let top = config.channels(levels - 1);
        let mut enc = bd.sub("encoder");
        let enc_in = Conv::new(&mut enc.sub("conv_in"), config.in_channels, config.channels(0), d.geom(3, 1), Init::Default);
        let mut enc_blocks = Vec::new();
        let mut enc_down = Vec::new();
        let mut ch = config.channels(0);
        for l in 0..levels {
            let out = config.channels(l);
            enc_blocks.push(ResBlock::new(&mut enc.sub(&format!("down{l}.block")), d, ch, out, None));
            ch = out;
            if l + 1 < levels {
                enc_down.push(Downsample::new(&mut enc.sub(&format!("down{l}.down")), d, ch));
            }
        }
        let enc_mid = ResBlock::new(&mut enc.sub("mid"), d, top, top, None);
        let enc_norm = GroupNorm::new(&mut enc.sub("norm_out"), top);
        let enc_out = Conv::new(&mut enc.sub("conv_out"), top, 2 * config.latent_channels, d.geom(3, 1), Init::Default);
        drop(enc);

        let mut dec = bd.sub("decoder");
        let dec_in = Conv::new(&mut dec.sub("conv_in"), config.latent_channels, top, d.geom(3, 1), Init::Default);
        let dec_mid = ResBlock::new(&mut dec.sub("mid"), d, top, top, None);
        let mut dec_blocks = Vec::new();
        let mut dec_up = Vec::new();
        let mut ch = top;
        for l in (0..levels).rev() {
            let out = config.channels(l);
            dec_blocks.push(ResBlock::new(&mut dec.sub(&format!("up{l}.block")), d, ch, out, None));
            ch = out;
            if l > 0 {
                dec_up.push(Upsample::new(&mut dec.sub(&format!("up{l}.up")), d, ch));
            }
        }
        let dec_norm = GroupNorm::new(&mut dec.sub("norm_out"), ch);
        let dec_out = Conv::new(&mut dec.sub("conv_out"), ch, config.in_channels, d.geom(3, 1), Init::Default);
        Ok(Self {
            config: config.clone(),
            enc_in,
            enc_blocks,
            enc_down,
            enc_mid,
            enc_norm,
            enc_out,
            dec_in,
            dec_mid,
            dec_blocks,
            dec_up,
            dec_norm,
            dec_out,
        })
    }

    /// Feature maps after each encoder level, finest first.
    pub fn encoder_features<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> Vec<Var<'t, S>> {
        let mut h = self.enc_in.forward(cx, x);
        let mut feats = Vec::new();
        for (l, block) in self.enc_blocks.iter().enumerate() {
            h = block.forward(cx, h, None);
            feats.push(h);
            if let Some(down) = self.enc_down.get(l) {
                h = down.forward(cx, h);
            }
        }
        feats
    }

    /// Posterior mean and clamped log-variance.
    pub fn encode<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> (Var<'t, S>, Var<'t, S>) {
        let h = *self.encoder_features(cx, x).last().expect("at least one level");
        let h = self.enc_mid.forward(cx, h, None);
        let h = self.enc_out.forward(cx, self.enc_norm.forward(cx, h).silu());
        let c = self.config.latent_channels;
        (h.narrow(0, c), h.narrow(c, c).clamp(LOGVAR_MIN, LOGVAR_MAX))
    }

    pub fn decode<'t, S: Real>(&self, cx: &Ctx<'t, S>, z: Var<'t, S>) -> Var<'t, S> {
        let mut h = self.dec_mid.forward(cx, self.dec_in.forward(cx, z), None);
        for (i, block) in self.dec_blocks.iter().enumerate() {
            h = block.forward(cx, h, None);
            if let Some(up) = self.dec_up.get(i) {
                h = up.forward(cx, h);
            }
        }
        self.dec_out.forward(cx, self.dec_norm.forward(cx, h).silu())
    }

    /// Negative ELBO with the reparameterisation noise `eps` supplied by
    /// the caller.
    pub fn elbo<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>, eps: Tensor<S>) -> ElboTerms<'t, S> {
        let (mu, logvar) = self.encode(cx, x);
        let z = logvar.scale(0.5).exp().mul(cx.constant(eps)).add(mu);
        let recon = self.decode(cx, z).sub(x).square().mean();
        let batch = x.shape()[0] as f64;
        let kl = mu.square().add(logvar.exp()).sub(logvar).offset(-1.0).sum().scale(0.5 / batch);
        let total = recon.add(kl.scale(self.config.kl_weight));
        ElboTerms { recon, kl, total }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = self.config.f;
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::invalid(format!(
                "expected [B, {}, D, H, W] images, got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[3] % f != 0 || shape[4] % f != 0 {
            return Err(Error::invalid(format!("image size {}x{} not divisible by f = {f}", shape[3], shape[4])));
        }
        if self.config.dims == Dims::Planar && shape[2] != 1 {
            return Err(Error::invalid("planar autoencoder expects depth 1"));
        }
        Ok(())
    }

    pub fn latent_shape(&self, image_shape: &[usize]) -> Vec<usize> {
        let f = self.config.f;
        vec![image_shape[0], self.config.latent_channels, image_shape[2], image_shape[3] / f, image_shape[4] / f]
    }
}

/// Differentiable feature-matching loss through a frozen, previously trained
/// encoder.
#[derive(Clone, Debug)]
pub struct PerceptualLoss {
    pub net: VaeNet,
    pub params: ParamStore<f32>,
}

impl PerceptualLoss {
    pub fn from_vae(vae: &Vae) -> Self {
        Self {
            net: vae.net.clone(),
            params: vae.params.clone(),
        }
    }

    /// Mean over levels of the squared distance between channel-normalised
    /// feature maps.
    pub fn loss<'t>(&'t self, tape: &'t Tape<f32>, x: Var<'t, f32>, y: Var<'t, f32>) -> Var<'t, f32> {
        let cx = Ctx::frozen(tape, &self.params);
        let fx = self.net.encoder_features(&cx, x);
        let fy = self.net.encoder_features(&cx, y);
        let mut total: Option<Var<'t, f32>> = None;
        for (a, b) in fx.into_iter().zip(fy) {
            let d = a.sub(b).square().mean();
            total = Some(match total {
                Some(t) => t.add(d),
                None => d,
            });
        }
        let n = self.net.config.channel_mults.len() as f64;
        total.expect("encoder has levels").scale(1.0 / n)
    }
}

/// Extra adversarial term for autoencoder training (for example a patch
/// discriminator). The trainer calls `generator_loss` inside the generator
/// step and `update_discriminator` afterwards.
pub trait AdversarialHook {
    fn generator_loss<'t>(&self, tape: &'t Tape<f32>, fake: Var<'t, f32>) -> Var<'t, f32>;
    fn update_discriminator(&mut self, real: &Tensor<f32>, fake: &Tensor<f32>, step: u64);
}

/// Trained (or initialised) autoencoder with its parameters.
#[derive(Clone, Debug)]
pub struct Vae {
    pub net: VaeNet,
    pub params: ParamStore<f32>,
    /// Multiplier mapping posterior means to unit-variance diffusion latents.
    pub latent_scale: f64,
    pub step: u64,
    pub history: Vec<LossRecord>,
    frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VaeHeader {
    kind: String,
    config: VaeConfig,
    latent_scale: f64,
    step: u64,
    frozen: bool,
    history: Vec<LossRecord>,
    settings: Option<TrainSettings>,
    adam_step: Option<u64>,
}

impl Vae {
    pub fn new(config: &VaeConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = VaeNet::build(config, &mut Builder::new(&mut params, &mut rng))?;
        Ok(Self {
            net,
            params,
            latent_scale: 1.0,
            step: 0,
            history: Vec::new(),
            frozen: false,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.net.config
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable parameters; fails once the model is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<f32>> {
        if self.frozen {
            Err(Error::Contract("autoencoder parameters are frozen".into()))
        } else {
            Ok(&mut self.params)
        }
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Weights of this planar model laid out for the volumetric build of
    /// `config`, each frame initially encoded on its own.
    pub fn inflated_params(&self, config: &VaeConfig) -> Result<ParamStore<f32>> {
        if self.config().dims != Dims::Planar || config.dims != Dims::Volumetric {
            return Err(Error::invalid("inflation maps a planar autoencoder onto a volumetric config"));
        }
        let mut out = Vae::new(config, 0)?.params;
        inflate_planar(&self.params, &mut out, Inflation::Centre)?;
        Ok(out)
    }

    /// Posterior of a `[B, C, D, H, W]` image batch.
    pub fn encode(&self, images: &Tensor<f32>) -> Result<LatentDistribution> {
        self.net.check_input(images.shape())?;
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.params);
        let (mu, logvar) = self.net.encode(&cx, cx.constant(images.clone()));
        Ok(LatentDistribution {
            mu: mu.tensor(),
            logvar: logvar.tensor(),
        })
    }

    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = z.shape();
        if s.len() != 5 || s[1] != self.config().latent_channels {
            return Err(Error::invalid(format!(
                "expected [B, {}, D, h, w] latents, got {s:?}",
                self.config().latent_channels
            )));
        }
        if self.config().dims == Dims::Planar && s[2] != 1 {
            return Err(Error::invalid("planar autoencoder expects depth 1"));
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.params);
        Ok(self.net.decode(&cx, cx.constant(z.clone())).tensor())
    }

    /// Scaled posterior means (the clean diffusion latents) of an image batch.
    pub fn latents(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let k = self.latent_scale as f32;
        Ok(self.encode(images)?.mu.map(|v| v * k))
    }

    /// Decodes scaled diffusion latents.
    pub fn decode_latents(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let k = 1.0 / self.latent_scale as f32;
        self.decode(&z.map(|v| v * k))
    }

    /// Average loss terms over `batch` with reparameterisation noise drawn
    /// from `seed`. Returns `(recon, kl, total)`.
    pub fn elbo_loss(&self, images: &Tensor<f32>, seed: u64) -> Result<(f64, f64, f64)> {
        self.net.check_input(images.shape())?;
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, &self.params);
        let eps = noise(&self.net.latent_shape(images.shape()), &mut ChaCha8Rng::seed_from_u64(seed));
        let t = self.net.elbo(&cx, cx.constant(images.clone()), eps);
        Ok((t.recon.item(), t.kl.item(), t.total.item()))
    }

    pub fn to_checkpoint(&self, settings: Option<&TrainSettings>, adam: Option<&Adam<f32>>) -> Result<Checkpoint> {
        let header = VaeHeader {
            kind: "vae".into(),
            config: self.config().clone(),
            latent_scale: self.latent_scale,
            step: self.step,
            frozen: self.frozen,
            history: self.history.clone(),
            settings: settings.cloned(),
            adam_step: adam.map(|a| a.step),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(header)?);
        ck.push_store("vae.", &self.params);
        if let Some(a) = adam {
            push_moments(&mut ck, "adam.", &self.params, a);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None, None)?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let header: VaeHeader = serde_json::from_value(ck.header.clone())?;
        if header.kind != "vae" {
            return Err(Error::invalid(format!("checkpoint holds a {:?} model, not an autoencoder", header.kind)));
        }
        let mut vae = Self::new(&header.config, 0)?;
        ck.load_store("vae.", &mut vae.params)?;
        vae.latent_scale = header.latent_scale;
        vae.step = header.step;
        vae.history = header.history;
        vae.frozen = header.frozen;
        Ok(vae)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn push_moments<S: Real>(ck: &mut Checkpoint, prefix: &str, params: &ParamStore<S>, adam: &Adam<S>) {
    let names: Vec<String> = params.names().to_vec();
    let mut m = ParamStore::<S>::new();
    let mut v = ParamStore::<S>::new();
    for (i, n) in names.iter().enumerate() {
        m.add(n.clone(), adam.m[i].clone());
        v.add(n.clone(), adam.v[i].clone());
    }
    ck.push_store(&format!("{prefix}m."), &m);
    ck.push_store(&format!("{prefix}v."), &v);
}

pub(crate) fn load_moments<S: Real>(ck: &Checkpoint, prefix: &str, params: &ParamStore<S>, step: u64) -> Result<Adam<S>> {
    let mut adam = Adam::new(params);
    let mut m = params.clone();
    let mut v = params.clone();
    ck.load_store(&format!("{prefix}m."), &mut m)?;
    ck.load_store(&format!("{prefix}v."), &mut v)?;
    adam.m = m.tensors().to_vec();
    adam.v = v.tensors().to_vec();
    adam.step = step;
    Ok(adam)
}

pub(crate) fn noise<S: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<S> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| S::of(rng.sample::<f64, _>(StandardNormal))).collect())
}

/// Which images the autoencoder trains on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeData {
    /// Frames per temporal block (volumetric models only).
    pub frames: Option<usize>,
    pub flip: bool,
    /// Fraction of subjects held out for validation.
    pub val_fraction: f64,
    /// Number of validation images.
    pub val_items: usize,
}

impl Default for VaeData {
    fn default() -> Self {
        Self {
            frames: None,
            flip: true,
            val_fraction: 0.1,
            val_items: 32,
        }
    }
}

/// Draws `count` training images (or temporal blocks) from `volumes`.
pub fn sample_images<R: Rng>(volumes: &[&Volume], temporal: bool, frames: Option<usize>, flip: bool, count: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let mut blocks = Vec::with_capacity(count);
    let mut shape = [0; 3];
    for _ in 0..count {
        let v = volumes[rng.random_range(0..volumes.len())];
        let z = rng.random_range(0..v.grid.slices);
        let fr = if temporal {
            match frames {
                Some(k) => uniform_frames(v.grid.frame_count(), k)?,
                None => (0..v.grid.frame_count()).collect(),
            }
        } else {
            vec![rng.random_range(0..v.grid.frame_count())]
        };
        let (fh, fv) = if flip { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
        shape = [fr.len(), v.grid.height, v.grid.width];
        blocks.push(extract_block(v, z, &fr, fh, fv));
    }
    let refs: Vec<&[f32]> = blocks.iter().map(Vec::as_slice).collect();
    Ok(batch_tensor(&refs, shape))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub final_val_psnr: f64,
    pub steps: u64,
    pub seconds: f64,
}

/// Optional extras for [`train_vae`].
#[derive(Default)]
pub struct VaeTrainExtras<'a> {
    pub perceptual: Option<&'a PerceptualLoss>,
    pub adversarial: Option<&'a mut dyn AdversarialHook>,
    /// Directory for periodic checkpoints (`vae_latest.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Resume from this checkpoint instead of initialising.
    pub resume: Option<Checkpoint>,
    /// Warm start: weights copied into the fresh model before step 1.
    pub init: Option<ParamStore<f32>>,
}

/// Trains an autoencoder on `volumes` for `settings.steps` steps, then
/// measures the latent scale and freezes the model. A zero budget returns
/// the initialised model unchanged (but frozen).
pub fn train_vae(volumes: &[Volume], config: &VaeConfig, data: &VaeData, settings: &TrainSettings, extras: VaeTrainExtras<'_>) -> Result<(Vae, VaeReport)> {
    config.validate()?;
    settings.validate()?;
    if volumes.is_empty() {
        return Err(Error::invalid("autoencoder training needs at least one volume"));
    }
    if config.use_perceptual && extras.perceptual.is_none() {
        return Err(Error::invalid("use_perceptual is set but no perceptual feature extractor was supplied"));
    }
    if config.use_adversarial && extras.adversarial.is_none() {
        return Err(Error::invalid("use_adversarial is set but no adversarial hook was supplied"));
    }
    let temporal = config.dims == Dims::Volumetric;
    let n_val = ((volumes.len() as f64 * data.val_fraction).round() as usize).min(volumes.len() - 1);
    let (val_vols, train_vols) = volumes.split_at(n_val);
    let train: Vec<&Volume> = train_vols.iter().collect();
    let val: Vec<&Volume> = if val_vols.is_empty() { train.clone() } else { val_vols.iter().collect() };
    let mut vrng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x7a1);
    let val_images = sample_images(&val, temporal, data.frames, false, data.val_items.max(1), &mut vrng)?;

    let (mut vae, mut adam) = match &extras.resume {
        Some(ck) => {
            let vae = Vae::from_checkpoint(ck)?;
            if vae.config() != config {
                return Err(Error::invalid("resume checkpoint was trained with a different autoencoder config"));
            }
            let adam = load_moments(ck, "adam.", &vae.params, vae.step)?;
            (vae, adam)
        }
        None => {
            let mut vae = Vae::new(config, settings.seed)?;
            if let Some(init) = &extras.init {
                vae.params = warm_start(&vae.params, init)?;
            }
            let adam = Adam::new(&vae.params);
            (vae, adam)
        }
    };
    vae.frozen = false;
    let initial = val_loss(&vae, &val_images, settings.seed)?;
    let sched = WarmupSchedule {
        base: settings.lr,
        warmup: settings.warmup_steps,
    };
    let start = std::time::Instant::now();
    let mut adversarial = extras.adversarial;
    let mut last_good: Option<PathBuf> = None;
    while vae.step < settings.steps {
        let step = vae.step + 1;
        let mut rng = step_rng(settings.seed, step);
        let images = sample_images(&train, temporal, data.frames, data.flip, settings.batch_size, &mut rng)?;
        let eps = noise::<f32, _>(&vae.net.latent_shape(images.shape()), &mut rng);
        let tape = Tape::new();
        let (loss, mut grads, fake) = {
            let cx = Ctx::new(&tape, &vae.params);
            let x = cx.constant(images.clone());
            let terms = vae.net.elbo(&cx, x, eps);
            let mut total = terms.total;
            let need_recon = extras.perceptual.is_some() || adversarial.is_some();
            let mut fake = None;
            if need_recon {
                let (mu, _) = vae.net.encode(&cx, x);
                let recon = vae.net.decode(&cx, mu);
                if let (true, Some(p)) = (config.use_perceptual, extras.perceptual) {
                    total = total.add(p.loss(&tape, recon, x).scale(config.perceptual_weight));
                }
                if let (true, Some(h)) = (config.use_adversarial, adversarial.as_deref()) {
                    total = total.add(h.generator_loss(&tape, recon).scale(config.adversarial_weight));
                }
                fake = Some(recon.tensor());
            }
            let loss = total.item();
            (loss, tape.backward(total), fake)
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                checkpoint: last_good,
            });
        }
        grads.scale_params(clip_factor(grads.param_norm(), settings.grad_clip));
        let lr = sched.lr(step);
        adam.update(&mut vae.params, &grads, lr);
        if let (Some(h), Some(fake)) = (adversarial.as_deref_mut(), fake) {
            h.update_discriminator(&images, &fake, step);
        }
        vae.step = step;
        vae.history.push(LossRecord { step, loss, lr });
        if settings.log_every > 0 && step % settings.log_every == 0 {
            log::info!("vae step {step}: loss {loss:.6}");
        }
        if let (Some(dir), true) = (&extras.checkpoint_dir, settings.checkpoint_every > 0 && step % settings.checkpoint_every == 0) {
            let path = dir.join("vae_latest.ckpt");
            vae.to_checkpoint(Some(settings), Some(&adam))?.save(&path)?;
            last_good = Some(path);
        }
    }
    if settings.steps > 0 {
        vae.latent_scale = measure_latent_scale(&vae, &train, temporal, data.frames, settings.seed)?;
    }
    let final_loss = val_loss(&vae, &val_images, settings.seed)?;
    let recon = vae.decode(&vae.encode(&val_images)?.mu)?;
    let psnr = crate::metrics::psnr(recon.data(), val_images.data(), 1.0)?;
    vae.freeze();
    let report = VaeReport {
        initial_val_loss: initial,
        final_val_loss: final_loss,
        final_val_psnr: psnr,
        steps: vae.step,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((vae, report))
}

fn val_loss(vae: &Vae, images: &Tensor<f32>, seed: u64) -> Result<f64> {
    Ok(vae.elbo_loss(images, seed ^ 0xe1b0)?.2)
}

/// `1 / std` of posterior means over a sample of training images.
fn measure_latent_scale(vae: &Vae, volumes: &[&Volume], temporal: bool, frames: Option<usize>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1e);
    let mut values = Vec::new();
    for _ in 0..4 {
        let images = sample_images(volumes, temporal, frames, false, 16, &mut rng)?;
        values.extend(vae.encode(&images)?.mu.to_f64_vec());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> VaeConfig {
        VaeConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            f: 2,
            latent_channels: 2,
            ..VaeConfig::default()
        }
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_divergence(&[0.0; 5], &[0.0; 5]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn shapes_follow_downsampling_factor() {
        let cfg = VaeConfig {
            base_channels: 4,
            ..VaeConfig::default()
        };
        let vae = Vae::new(&cfg, 0).unwrap();
        let x = Tensor::full(&[2, 1, 1, 64, 64], 0.5f32);
        let d = vae.encode(&x).unwrap();
        assert_eq!(d.mu.shape(), &[2, 4, 1, 16, 16]);
        assert_eq!(vae.decode(&d.mu).unwrap().shape(), &[2, 1, 1, 64, 64]);
        assert!(vae.encode(&Tensor::zeros(&[1, 1, 1, 30, 32])).is_err());
        assert_eq!(vae.encode(&x).unwrap(), d);
    }

    #[test]
    fn volumetric_keeps_time() {
        let cfg = VaeConfig {
            dims: Dims::Volumetric,
            ..tiny()
        };
        let vae = Vae::new(&cfg, 0).unwrap();
        let d = vae.encode(&Tensor::full(&[1, 1, 5, 16, 16], 0.2f32)).unwrap();
        assert_eq!(d.mu.shape(), &[1, 2, 5, 8, 8]);
    }

    #[test]
    fn zero_variance_reparameterisation() {
        let d = LatentDistribution {
            mu: Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]),
            logvar: Tensor::full(&[3], -1e9),
        };
        let z = reparameterize(&d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(z.data().iter().zip(d.mu.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn frozen_params_refuse_mutation() {
        let mut vae = Vae::new(&tiny(), 1).unwrap();
        assert!(vae.params_mut().is_ok());
        vae.freeze();
        assert!(vae.params_mut().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let vae = Vae::new(&tiny(), 3).unwrap();
        let ck = vae.to_checkpoint(None, None).unwrap();
        let back = Vae::from_checkpoint(&Checkpoint::decode(&ck.encode().unwrap(), Path::new("x")).unwrap()).unwrap();
        assert_eq!(back.checksum(), vae.checksum());
        assert_eq!(back.config(), vae.config());
    }
}

/// `init` with the names and shapes of `fresh`, or an error naming the first
/// mismatch.
pub(crate) fn warm_start<S: Real>(fresh: &ParamStore<S>, init: &ParamStore<S>) -> Result<ParamStore<S>> {
    let mut out = fresh.clone();
    out.load_from(init.iter().map(|(n, t)| (n, t.clone())))
        .map_err(|e| Error::invalid(format!("warm-start weights: {e}")))?;
    Ok(out)
}
