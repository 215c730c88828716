//! Conditional noise predictor and its two-stage conditioning.
//!
//! The noise predictor is a time-conditioned U-Net on diffusion latents.
//! The context encoder maps the two raw neighbour slices down to latent
//! resolution and ends in a zero convolution, so its code `z_c` starts at
//! zero. The injection network reads `z_c` and `z_t`, mirrors the U-Net
//! encoder, and emits one zero-initialised feature map per scale that is
//! added to the U-Net encoder output at that scale (and therefore to the
//! matching decoder skip). All three networks train jointly.

use crate::diffusion::{forward_sample, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::io::checkpoint::Checkpoint;
use crate::nn::{inflate_planar, AttnBlock, Inflation, Builder, Conv, Dims, Downsample, GroupNorm, Init, ResBlock, TimeEmbed, Upsample};
use crate::tensor::optim::{Adam, Ema, WarmupSchedule};
use crate::tensor::{Ctx, ParamStore, Real, Tape, Tensor, Var};
use crate::train::{clip_factor, step_rng, LossRecord, TrainSettings};
use crate::vae::{load_moments, noise, push_moments, reparameterize, LatentDistribution, Vae};
use crate::volume::{batch_tensor, sample_training_item, ItemOptions, TrainingItem, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub dims: Dims,
    /// Channels of the diffusion latent; must match the autoencoder.
    pub latent_channels: usize,
    pub image_channels: usize,
    /// In-plane downsampling of the context encoder; must match the
    /// autoencoder factor.
    pub f: usize,
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    /// U-Net levels (0 = finest) that carry self-attention.
    pub attention_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub context_base_channels: usize,
    /// Channels of the context code `z_c`.
    pub context_latent_channels: usize,
    /// Also add the injections to the decoder output at each scale.
    pub inject_decoder: bool,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    /// Train on posterior samples instead of posterior means.
    pub sample_posterior: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            dims: Dims::Planar,
            latent_channels: 4,
            image_channels: 1,
            f: 4,
            base_channels: 32,
            channel_mults: vec![1, 2, 2],
            attention_levels: vec![2],
            time_embed_dim: 128,
            context_base_channels: 16,
            context_latent_channels: 4,
            inject_decoder: false,
            diffusion_steps: 1000,
            schedule: ScheduleKind::Linear,
            sample_posterior: false,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channel_mults.len();
        if levels == 0 || self.base_channels == 0 || self.channel_mults.contains(&0) {
            return Err(Error::invalid("denoiser needs positive channel widths and at least one level"));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= levels) {
            return Err(Error::invalid(format!("attention level {l} does not exist ({levels} levels)")));
        }
        if !self.f.is_power_of_two() || self.f < 2 {
            return Err(Error::invalid(format!("context downsampling factor must be a power of two >= 2, got {}", self.f)));
        }
        if self.latent_channels == 0 || self.image_channels == 0 || self.context_latent_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be even"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::invalid("diffusion_steps must be positive"));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Channels of the stacked neighbour pair fed to the context encoder.
    pub fn context_channels(&self) -> usize {
        2 * self.image_channels
    }

    fn context_width(&self, stage: usize) -> usize {
        self.context_base_channels * if stage == 0 { 1 } else { 2 }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.diffusion_steps, self.schedule)
    }
}

/// One U-Net level: a time-conditioned residual block with optional
/// attention.
#[derive(Clone, Debug)]
struct Level {
    block: ResBlock,
    attn: Option<AttnBlock>,
}

impl Level {
    fn new<S: Real, R: Rng>(bd: &mut Builder<'_, S, R>, c: &DenoiserConfig, level: usize, cin: usize, cout: usize) -> Self {
        Self {
            block: ResBlock::new(&mut bd.sub("block"), c.dims, cin, cout, Some(c.time_embed_dim)),
            attn: c.attention_levels.contains(&level).then(|| AttnBlock::new(&mut bd.sub("attn"), c.dims, cout)),
        }
    }

    fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>, temb: Var<'t, S>) -> Var<'t, S> {
        let h = self.block.forward(cx, x, Some(temb));
        match &self.attn {
            Some(a) => a.forward(cx, h),
            None => h,
        }
    }
}

/// Network structure of the noise predictor and both conditioning stages.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    pub config: DenoiserConfig,
    time: TimeEmbed,
    conv_in: Conv,
    enc: Vec<Level>,
    down: Vec<Downsample>,
    mid1: ResBlock,
    mid_attn: AttnBlock,
    mid2: ResBlock,
    dec: Vec<Level>,
    up: Vec<Upsample>,
    norm_out: GroupNorm,
    conv_out: Conv,
    ctx_in: Conv,
    ctx_stages: Vec<(Downsample, ResBlock)>,
    ctx_norm: GroupNorm,
    ctx_out: Conv,
    inj_in: Conv,
    inj: Vec<Level>,
    inj_down: Vec<Downsample>,
    inj_out: Vec<Conv>,
}

impl DenoiserNet {
    pub fn build<S: Real, R: Rng>(config: &DenoiserConfig, bd: &mut Builder<'_, S, R>) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.dims;
        let levels = c.levels();
        let top = c.channels(levels - 1);
        let time = TimeEmbed::new(&mut bd.sub("time"), c.time_embed_dim, c.time_embed_dim);

        let mut u = bd.sub("unet");
        let conv_in = Conv::new(&mut u.sub("conv_in"), c.latent_channels, c.channels(0), d.geom(3, 1), Init::Default);
        let (mut enc, mut down) = (Vec::new(), Vec::new());
        let mut ch = c.channels(0);
        for l in 0..levels {
            enc.push(Level::new(&mut u.sub(&format!("down{l}")), c, l, ch, c.channels(l)));
            ch = c.channels(l);
            if l + 1 < levels {
                down.push(Downsample::new(&mut u.sub(&format!("down{l}.down")), d, ch));
            }
        }
        let mid1 = ResBlock::new(&mut u.sub("mid.block1"), d, top, top, Some(c.time_embed_dim));
        let mid_attn = AttnBlock::new(&mut u.sub("mid.attn"), d, top);
        let mid2 = ResBlock::new(&mut u.sub("mid.block2"), d, top, top, Some(c.time_embed_dim));
        let (mut dec, mut up) = (Vec::new(), Vec::new());
        for l in (0..levels).rev() {
            dec.push(Level::new(&mut u.sub(&format!("up{l}")), c, l, ch + c.channels(l), c.channels(l)));
            ch = c.channels(l);
            if l > 0 {
                up.push(Upsample::new(&mut u.sub(&format!("up{l}.up")), d, ch));
            }
        }
        let norm_out = GroupNorm::new(&mut u.sub("norm_out"), ch);
        let conv_out = Conv::new(&mut u.sub("conv_out"), ch, c.latent_channels, d.geom(3, 1), Init::Default);
        drop(u);

        let mut t1 = bd.sub("context");
        let ctx_in = Conv::new(&mut t1.sub("conv_in"), c.context_channels(), c.context_width(0), d.geom(3, 1), Init::Default);
        let mut ctx_stages = Vec::new();
        let stages = c.f.trailing_zeros() as usize;
        for s in 0..stages {
            let mut sb = t1.sub(&format!("stage{s}"));
            let cin = c.context_width(s);
            let down = Downsample::new(&mut sb.sub("down"), d, cin);
            let block = ResBlock::new(&mut sb.sub("block"), d, cin, c.context_width(s + 1), None);
            ctx_stages.push((down, block));
        }
        let cw = c.context_width(stages);
        let ctx_norm = GroupNorm::new(&mut t1.sub("norm_out"), cw);
        let ctx_out = Conv::new(&mut t1.sub("zero_out"), cw, c.context_latent_channels, d.geom(3, 1), Init::Zero);
        drop(t1);

        let mut t2 = bd.sub("inject");
        let inj_in = Conv::new(
            &mut t2.sub("conv_in"),
            c.context_latent_channels + c.latent_channels,
            c.channels(0),
            d.geom(3, 1),
            Init::Default,
        );
        let (mut inj, mut inj_down, mut inj_out) = (Vec::new(), Vec::new(), Vec::new());
        let mut ch = c.channels(0);
        for l in 0..levels {
            let cl = c.channels(l);
            inj.push(Level::new(&mut t2.sub(&format!("level{l}")), c, l, ch, cl));
            inj_out.push(Conv::new(&mut t2.sub(&format!("level{l}.zero_out")), cl, cl, d.geom(1, 1), Init::Zero));
            ch = cl;
            if l + 1 < levels {
                inj_down.push(Downsample::new(&mut t2.sub(&format!("level{l}.down")), d, ch));
            }
        }
        Ok(Self {
            config: config.clone(),
            time,
            conv_in,
            enc,
            down,
            mid1,
            mid_attn,
            mid2,
            dec,
            up,
            norm_out,
            conv_out,
            ctx_in,
            ctx_stages,
            ctx_norm,
            ctx_out,
            inj_in,
            inj,
            inj_down,
            inj_out,
        })
    }

    pub fn time_embedding<'t, S: Real>(&self, cx: &Ctx<'t, S>, t: &[f64]) -> Var<'t, S> {
        self.time.forward(cx, t)
    }

    /// Context code `z_c` of a `[B, 2C, D, H, W]` neighbour pair.
    pub fn encode_context<'t, S: Real>(&self, cx: &Ctx<'t, S>, context: Var<'t, S>) -> Var<'t, S> {
        let mut h = self.ctx_in.forward(cx, context);
        for (down, block) in &self.ctx_stages {
            h = block.forward(cx, down.forward(cx, h), None);
        }
        self.ctx_out.forward(cx, self.ctx_norm.forward(cx, h).silu())
    }

    /// Per-scale injection features, finest first.
    pub fn inject<'t, S: Real>(&self, cx: &Ctx<'t, S>, z_c: Var<'t, S>, z_t: Var<'t, S>, temb: Var<'t, S>) -> Vec<Var<'t, S>> {
        let mut h = self.inj_in.forward(cx, z_c.concat(z_t));
        let mut out = Vec::with_capacity(self.inj.len());
        for (l, level) in self.inj.iter().enumerate() {
            h = level.forward(cx, h, temb);
            out.push(self.inj_out[l].forward(cx, h));
            if let Some(down) = self.inj_down.get(l) {
                h = down.forward(cx, h);
            }
        }
        out
    }

    /// U-Net pass; `inject` holds one additive feature map per level.
    pub fn unet<'t, S: Real>(&self, cx: &Ctx<'t, S>, z_t: Var<'t, S>, temb: Var<'t, S>, inject: Option<&[Var<'t, S>]>) -> Var<'t, S> {
        let levels = self.enc.len();
        let mut h = self.conv_in.forward(cx, z_t);
        let mut skips = Vec::with_capacity(levels);
        for (l, level) in self.enc.iter().enumerate() {
            h = level.forward(cx, h, temb);
            if let Some(inj) = inject {
                h = h.add(inj[l]);
            }
            skips.push(h);
            if let Some(down) = self.down.get(l) {
                h = down.forward(cx, h);
            }
        }
        h = self.mid1.forward(cx, h, Some(temb));
        h = self.mid_attn.forward(cx, h);
        h = self.mid2.forward(cx, h, Some(temb));
        for (i, level) in self.dec.iter().enumerate() {
            let l = levels - 1 - i;
            h = level.forward(cx, h.concat(skips[l]), temb);
            if let (true, Some(inj)) = (self.config.inject_decoder, inject) {
                h = h.add(inj[l]);
            }
            if let Some(up) = self.up.get(i) {
                h = up.forward(cx, h);
            }
        }
        self.conv_out.forward(cx, self.norm_out.forward(cx, h).silu())
    }

    /// Full conditioned prediction `eps(z_t, t, context)`.
    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, z_t: Var<'t, S>, t: &[f64], context: Var<'t, S>) -> Var<'t, S> {
        let temb = self.time_embedding(cx, t);
        let z_c = self.encode_context(cx, context);
        let inj = self.inject(cx, z_c, z_t, temb);
        self.unet(cx, z_t, temb, Some(&inj))
    }

    /// Checks a latent batch and (optionally) its pixel-space context.
    pub fn check_shapes(&self, z_t: &[usize], context: Option<&[usize]>) -> Result<()> {
        let c = &self.config;
        if z_t.len() != 5 || z_t[1] != c.latent_channels {
            return Err(Error::invalid(format!("expected [B, {}, D, h, w] latents, got {z_t:?}", c.latent_channels)));
        }
        if c.dims == Dims::Planar && z_t[2] != 1 {
            return Err(Error::invalid("planar denoiser expects depth 1"));
        }
        let m = 1 << (c.levels() - 1);
        if z_t[3] % m != 0 || z_t[4] % m != 0 {
            return Err(Error::invalid(format!("latent size {}x{} not divisible by {m}", z_t[3], z_t[4])));
        }
        if let Some(s) = context {
            let expected = [z_t[0], c.context_channels(), z_t[2], z_t[3] * c.f, z_t[4] * c.f];
            if s != expected {
                return Err(Error::Shape {
                    expected: expected.to_vec(),
                    got: s.to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Output of both conditioning stages for one latent batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEmbedding {
    pub z_c: Tensor<f32>,
    pub injection_features: Vec<Tensor<f32>>,
}

/// Neighbour slices and target, each `[B, C, D, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceBatch {
    pub prev: Tensor<f32>,
    pub target: Tensor<f32>,
    pub next: Tensor<f32>,
}

impl SliceBatch {
    pub fn from_items(items: &[TrainingItem]) -> Result<Self> {
        let shape = items.first().ok_or_else(|| Error::invalid("empty batch"))?.shape;
        if items.iter().any(|i| i.shape != shape) {
            return Err(Error::invalid("batch items differ in shape"));
        }
        let stack = |f: fn(&TrainingItem) -> &Vec<f32>| {
            let refs: Vec<&[f32]> = items.iter().map(|i| f(i).as_slice()).collect();
            batch_tensor(&refs, shape)
        };
        Ok(Self {
            prev: stack(|i| &i.prev),
            target: stack(|i| &i.target),
            next: stack(|i| &i.next),
        })
    }

    pub fn context(&self) -> Result<Tensor<f32>> {
        concat_channels(&self.prev, &self.next)
    }
}

/// Stacks two `[B, C, ...]` tensors along the channel axis.
pub fn concat_channels<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::Shape {
            expected: sa.to_vec(),
            got: sb.to_vec(),
        });
    }
    let (pa, pb) = (a.numel() / sa[0], b.numel() / sb[0]);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..sa[0] {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    Ok(Tensor::from_vec(&shape, data))
}

/// A noised latent batch with one timestep per item.
#[derive(Clone, Debug)]
pub struct Noised<S> {
    pub t: Vec<usize>,
    pub eps: Tensor<S>,
    pub z_t: Tensor<S>,
}

/// Draws `t ~ U{1..T}` and `eps ~ N(0, I)` per item and corrupts `z0`.
pub fn draw_noised<S: Real, R: Rng>(z0: &Tensor<S>, sched: &NoiseSchedule, rng: &mut R) -> Result<Noised<S>> {
    let b = z0.batch();
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps)).collect();
    let eps: Tensor<S> = noise(z0.shape(), rng);
    let items = (0..b)
        .map(|i| forward_sample(&z0.item(i), t[i], &eps.item(i), sched))
        .collect::<Result<Vec<_>>>()?;
    Ok(Noised {
        t,
        eps,
        z_t: Tensor::stack_batch(&items),
    })
}

fn as_f64(t: &[usize]) -> Vec<f64> {
    t.iter().map(|&v| v as f64).collect()
}

/// Differentiable generative loss `mean |eps_hat - eps|²` for given noised
/// latents and context.
pub fn generative_loss_graph<'t, S: Real>(net: &DenoiserNet, cx: &Ctx<'t, S>, noised: &Noised<S>, context: &Tensor<S>) -> Var<'t, S> {
    let pred = net.forward(cx, cx.constant(noised.z_t.clone()), &as_f64(&noised.t), cx.constant(context.clone()));
    pred.sub(cx.constant(noised.eps.clone())).square().mean()
}

/// Clean diffusion latents of the batch targets.
fn target_latents<R: Rng>(vae: &Vae, target: &Tensor<f32>, sample_posterior: bool, rng: &mut R) -> Result<Tensor<f32>> {
    if sample_posterior {
        let k = vae.latent_scale as f32;
        Ok(reparameterize(&vae.encode(target)?, rng)?.map(|v| v * k))
    } else {
        vae.latents(target)
    }
}

/// Generative loss of an arbitrary noise predictor
/// `predict(z_t, t, batch)` on one batch. The autoencoder must be frozen.
pub fn generative_loss<R, P>(batch: &SliceBatch, vae: &Vae, sched: &NoiseSchedule, sample_posterior: bool, rng: &mut R, mut predict: P) -> Result<f64>
where
    R: Rng,
    P: FnMut(&Tensor<f32>, &[usize], &SliceBatch) -> Result<Tensor<f32>>,
{
    if !vae.is_frozen() {
        return Err(Error::Contract("the autoencoder must be frozen before diffusion training".into()));
    }
    let z0 = target_latents(vae, &batch.target, sample_posterior, rng)?;
    let n = draw_noised(&z0, sched, rng)?;
    let pred = predict(&n.z_t, &n.t, batch)?;
    crate::error::check_shape(n.eps.shape(), pred.shape())?;
    let sq: f64 = pred.data().iter().zip(n.eps.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sq / pred.numel() as f64)
}

/// Which weights inference uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    #[default]
    Ema,
    Raw,
}

/// Trained (or initialised) denoiser with raw and EMA weights.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub net: DenoiserNet,
    pub params: ParamStore<f32>,
    pub ema: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub inference_weights: Weights,
    pub step: u64,
    pub history: Vec<LossRecord>,
    /// Checksum of the autoencoder the model was trained against.
    pub vae_checksum: Option<String>,
    /// Frames per block seen in volumetric training.
    pub trained_frames: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DenoiserHeader {
    kind: String,
    config: DenoiserConfig,
    schedule: ScheduleKind,
    diffusion_steps: usize,
    step: u64,
    history: Vec<LossRecord>,
    vae_checksum: Option<String>,
    #[serde(default)]
    trained_frames: Option<usize>,
    settings: Option<TrainSettings>,
    ema_decay: f64,
    ema_updates: u64,
    adam_step: Option<u64>,
}

impl Denoiser {
    pub fn new(config: &DenoiserConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DenoiserNet::build(config, &mut Builder::new(&mut params, &mut rng))?;
        Ok(Self {
            net,
            ema: params.clone(),
            params,
            schedule: config.schedule()?,
            inference_weights: Weights::Ema,
            step: 0,
            history: Vec::new(),
            vae_checksum: None,
            trained_frames: None,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.net.config
    }

    pub fn weights(&self) -> &ParamStore<f32> {
        match self.inference_weights {
            Weights::Ema => &self.ema,
            Weights::Raw => &self.params,
        }
    }

    /// Inference weights of this planar model laid out for the volumetric
    /// build of `config`, each frame initially denoised on its own.
    pub fn inflated_params(&self, config: &DenoiserConfig) -> Result<ParamStore<f32>> {
        if self.config().dims != Dims::Planar || config.dims != Dims::Volumetric {
            return Err(Error::invalid("inflation maps a planar denoiser onto a volumetric config"));
        }
        let mut out = Denoiser::new(config, 0)?.params;
        inflate_planar(self.weights(), &mut out, Inflation::Centre)?;
        Ok(out)
    }

    fn check_t(&self, t: &[usize], batch: usize) -> Result<()> {
        if t.len() != batch {
            return Err(Error::invalid(format!("{} timesteps for a batch of {batch}", t.len())));
        }
        if let Some(&bad) = t.iter().find(|&&v| v > self.schedule.steps) {
            return Err(Error::invalid(format!("timestep {bad} outside [0, {}]", self.schedule.steps)));
        }
        Ok(())
    }

    /// Context code of a neighbour pair, each `[B, C, D, H, W]`.
    pub fn encode_context(&self, prev: &Tensor<f32>, next: &Tensor<f32>) -> Result<Tensor<f32>> {
        if prev.shape() != next.shape() {
            return Err(Error::Shape {
                expected: prev.shape().to_vec(),
                got: next.shape().to_vec(),
            });
        }
        let context = concat_channels(prev, next)?;
        let c = self.config();
        let s = context.shape();
        if s.len() != 5 || s[1] != c.context_channels() || s[3] % c.f != 0 || s[4] % c.f != 0 {
            return Err(Error::invalid(format!("context batch {s:?} incompatible with the denoiser")));
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, self.weights());
        Ok(self.net.encode_context(&cx, cx.constant(context)).tensor())
    }

    /// Injection features for `z_t` at timesteps `t` given a context code.
    pub fn inject_condition(&self, z_c: &Tensor<f32>, z_t: &Tensor<f32>, t: &[usize]) -> Result<Vec<Tensor<f32>>> {
        self.net.check_shapes(z_t.shape(), None)?;
        let zs = z_c.shape();
        if zs.len() != 5 || zs[0] != z_t.shape()[0] || zs[1] != self.config().context_latent_channels || zs[2..] != z_t.shape()[2..] {
            return Err(Error::invalid(format!("context code {zs:?} does not match latents {:?}", z_t.shape())));
        }
        self.check_t(t, z_t.batch())?;
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, self.weights());
        let temb = self.net.time_embedding(&cx, &as_f64(t));
        Ok(self
            .net
            .inject(&cx, cx.constant(z_c.clone()), cx.constant(z_t.clone()), temb)
            .into_iter()
            .map(|v| v.tensor())
            .collect())
    }

    pub fn condition(&self, prev: &Tensor<f32>, next: &Tensor<f32>, z_t: &Tensor<f32>, t: &[usize]) -> Result<ConditionEmbedding> {
        let z_c = self.encode_context(prev, next)?;
        let injection_features = self.inject_condition(&z_c, z_t, t)?;
        Ok(ConditionEmbedding { z_c, injection_features })
    }

    /// Noise prediction with precomputed injection features.
    pub fn predict_noise(&self, z_t: &Tensor<f32>, t: &[usize], cond: &ConditionEmbedding) -> Result<Tensor<f32>> {
        self.net.check_shapes(z_t.shape(), None)?;
        self.check_t(t, z_t.batch())?;
        if cond.injection_features.len() != self.config().levels() {
            return Err(Error::invalid("one injection feature map per U-Net level required"));
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, self.weights());
        let temb = self.net.time_embedding(&cx, &as_f64(t));
        let inj: Vec<_> = cond.injection_features.iter().map(|f| cx.constant(f.clone())).collect();
        let z = cx.constant(z_t.clone());
        Ok(self.net.unet(&cx, z, temb, Some(&inj)).tensor())
    }

    /// U-Net pass without any injection.
    pub fn predict_noise_unconditional(&self, z_t: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        self.net.check_shapes(z_t.shape(), None)?;
        self.check_t(t, z_t.batch())?;
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, self.weights());
        let temb = self.net.time_embedding(&cx, &as_f64(t));
        Ok(self.net.unet(&cx, cx.constant(z_t.clone()), temb, None).tensor())
    }

    /// Binds a neighbour pair so repeated predictions reuse its context
    /// code.
    pub fn conditioned(&self, prev: &Tensor<f32>, next: &Tensor<f32>) -> Result<Conditioned<'_>> {
        Ok(Conditioned {
            model: self,
            z_c: self.encode_context(prev, next)?,
        })
    }

    pub fn to_checkpoint(&self, settings: Option<&TrainSettings>, ema: &Ema, adam: Option<&Adam<f32>>) -> Result<Checkpoint> {
        let header = DenoiserHeader {
            kind: "denoiser".into(),
            config: self.config().clone(),
            schedule: self.schedule.kind,
            diffusion_steps: self.schedule.steps,
            step: self.step,
            history: self.history.clone(),
            vae_checksum: self.vae_checksum.clone(),
            trained_frames: self.trained_frames,
            settings: settings.cloned(),
            ema_decay: ema.decay,
            ema_updates: ema.updates,
            adam_step: adam.map(|a| a.step),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(header)?);
        ck.push_store("params.", &self.params);
        ck.push_store("ema.", &self.ema);
        if let Some(a) = adam {
            push_moments(&mut ck, "adam.", &self.params, a);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None, &Ema::new(DEFAULT_EMA_DECAY), None)?.save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self::restore(ck)?.0)
    }

    fn restore(ck: &Checkpoint) -> Result<(Self, Ema, Option<Adam<f32>>)> {
        let h: DenoiserHeader = serde_json::from_value(ck.header.clone())?;
        if h.kind != "denoiser" {
            return Err(Error::invalid(format!("checkpoint holds a {:?} model, not a denoiser", h.kind)));
        }
        let mut den = Self::new(&h.config, 0)?;
        ck.load_store("params.", &mut den.params)?;
        ck.load_store("ema.", &mut den.ema)?;
        den.schedule = NoiseSchedule::new(h.diffusion_steps, h.schedule)?;
        den.step = h.step;
        den.history = h.history;
        den.vae_checksum = h.vae_checksum;
        den.trained_frames = h.trained_frames;
        let mut ema = Ema::new(h.ema_decay);
        ema.updates = h.ema_updates;
        let adam = match h.adam_step {
            Some(s) => Some(load_moments(ck, "adam.", &den.params, s)?),
            None => None,
        };
        Ok((den, ema, adam))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Fails unless `vae` is the autoencoder this model was trained with.
    pub fn check_vae(&self, vae: &Vae) -> Result<()> {
        match &self.vae_checksum {
            Some(c) if *c != vae.checksum() => Err(Error::invalid("autoencoder checkpoint differs from the one used in diffusion training")),
            _ => Ok(()),
        }
    }
}

/// A denoiser bound to one batch of neighbour pairs.
pub struct Conditioned<'a> {
    pub model: &'a Denoiser,
    pub z_c: Tensor<f32>,
}

impl Conditioned<'_> {
    /// Predicts noise for the whole batch at a shared timestep.
    pub fn predict(&self, z_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        let m = self.model;
        m.net.check_shapes(z_t.shape(), None)?;
        let ts = vec![t; z_t.batch()];
        m.check_t(&ts, z_t.batch())?;
        if self.z_c.shape()[0] != z_t.batch() || self.z_c.shape()[2..] != z_t.shape()[2..] {
            return Err(Error::invalid("latents do not match the bound context"));
        }
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, m.weights());
        let temb = m.net.time_embedding(&cx, &as_f64(&ts));
        let z = cx.constant(z_t.clone());
        let inj = m.net.inject(&cx, cx.constant(self.z_c.clone()), z, temb);
        Ok(m.net.unet(&cx, z, temb, Some(&inj)).tensor())
    }
}

pub const DEFAULT_EMA_DECAY: f64 = 0.999;

/// Training data and EMA options for [`train_diffusion`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionData {
    pub items: ItemOptions,
    pub ema_decay: f64,
    /// Ramp the EMA decay during early training.
    pub ema_warmup: bool,
    /// Items in the fixed evaluation batch used for the loss report.
    pub eval_items: usize,
}

impl Default for DiffusionData {
    fn default() -> Self {
        Self {
            items: ItemOptions::default(),
            ema_decay: DEFAULT_EMA_DECAY,
            ema_warmup: true,
            eval_items: 32,
        }
    }
}

#[derive(Default)]
pub struct DiffusionExtras {
    /// Directory for periodic checkpoints (`diffusion_latest.ckpt`).
    pub checkpoint_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Warm start: weights copied into the fresh model before step 1.
    pub init: Option<ParamStore<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    /// Loss of the initial weights on the fixed evaluation draws.
    pub initial_eval_loss: f64,
    pub final_eval_loss_raw: f64,
    pub final_eval_loss_ema: f64,
    pub steps: u64,
    pub seconds: f64,
    pub vae_checksum: String,
}

type CacheKey = (usize, usize, Vec<usize>, bool, bool);

/// Posterior moments of target slices, cached per subject, slice, frame
/// selection and flip.
struct LatentCache<'a> {
    vae: &'a Vae,
    map: HashMap<CacheKey, (Tensor<f32>, Tensor<f32>)>,
}

impl<'a> LatentCache<'a> {
    fn new(vae: &'a Vae) -> Self {
        Self { vae, map: HashMap::new() }
    }

    fn latents<R: Rng>(&mut self, subjects: &[usize], items: &[TrainingItem], sample: bool, rng: &mut R) -> Result<Tensor<f32>> {
        let keys: Vec<CacheKey> = subjects
            .iter()
            .zip(items)
            .map(|(&s, i)| (s, i.index, i.frames.clone(), i.flip_h, i.flip_v))
            .collect();
        let missing: Vec<usize> = (0..items.len()).filter(|&i| !self.map.contains_key(&keys[i])).collect();
        if !missing.is_empty() {
            let refs: Vec<&[f32]> = missing.iter().map(|&i| items[i].target.as_slice()).collect();
            let dist = self.vae.encode(&batch_tensor(&refs, items[missing[0]].shape))?;
            for (j, &i) in missing.iter().enumerate() {
                self.map.insert(keys[i].clone(), (dist.mu.item(j), dist.logvar.item(j)));
            }
        }
        let (mu, lv): (Vec<_>, Vec<_>) = keys.iter().map(|k| self.map[k].clone()).unzip();
        let dist = LatentDistribution {
            mu: Tensor::stack_batch(&mu),
            logvar: Tensor::stack_batch(&lv),
        };
        let k = self.vae.latent_scale as f32;
        let z = if sample { reparameterize(&dist, rng)? } else { dist.mu };
        Ok(z.map(|v| v * k))
    }
}

fn draw_items<R: Rng>(volumes: &[Volume], opts: &ItemOptions, count: usize, rng: &mut R) -> Result<(Vec<usize>, Vec<TrainingItem>)> {
    let mut subjects = Vec::with_capacity(count);
    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let s = rng.random_range(0..volumes.len());
        items.push(sample_training_item(&volumes[s], opts, rng)?);
        subjects.push(s);
    }
    Ok((subjects, items))
}

struct EvalSet {
    noised: Noised<f32>,
    context: Tensor<f32>,
}

fn eval_loss(net: &DenoiserNet, params: &ParamStore<f32>, set: &EvalSet) -> f64 {
    let tape = Tape::inference();
    let cx = Ctx::new(&tape, params);
    generative_loss_graph(net, &cx, &set.noised, &set.context).item()
}

/// Jointly trains the noise predictor and both conditioning stages against
/// a frozen autoencoder.
pub fn train_diffusion(
    volumes: &[Volume],
    vae: &Vae,
    config: &DenoiserConfig,
    data: &DiffusionData,
    settings: &TrainSettings,
    extras: DiffusionExtras,
) -> Result<(Denoiser, DiffusionReport)> {
    config.validate()?;
    settings.validate()?;
    if !vae.is_frozen() {
        return Err(Error::Contract("the autoencoder must be frozen before diffusion training".into()));
    }
    if vae.config().latent_channels != config.latent_channels || vae.config().f != config.f || vae.config().dims != config.dims {
        return Err(Error::invalid("denoiser config does not match the autoencoder (latent channels, factor or dims)"));
    }
    if volumes.is_empty() {
        return Err(Error::invalid("diffusion training needs at least one volume"));
    }
    let mut items_opts = data.items.clone();
    items_opts.temporal = config.dims == Dims::Volumetric;
    let vae_checksum = vae.checksum();

    let (mut den, mut ema, mut adam) = match &extras.resume {
        Some(ck) => {
            let (den, ema, adam) = Denoiser::restore(ck)?;
            if den.config() != config {
                return Err(Error::invalid("resume checkpoint was trained with a different denoiser config"));
            }
            den.check_vae(vae)?;
            let adam = adam.unwrap_or_else(|| Adam::new(&den.params));
            (den, ema, adam)
        }
        None => {
            let mut den = Denoiser::new(config, settings.seed)?;
            if let Some(init) = &extras.init {
                den.params = crate::vae::warm_start(&den.params, init)?;
                den.ema = den.params.clone();
            }
            let adam = Adam::new(&den.params);
            let mut ema = Ema::new(data.ema_decay);
            ema.warmup = data.ema_warmup;
            (den, ema, adam)
        }
    };
    den.vae_checksum = Some(vae_checksum.clone());
    if items_opts.temporal {
        den.trained_frames = Some(match items_opts.subsample_frames {
            Some(k) => k,
            None => volumes[0].grid.frame_count(),
        });
    }

    let mut cache = LatentCache::new(vae);
    let mut erng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0xe7a1);
    let mut eval_opts = items_opts.clone();
    eval_opts.flip = false;
    let (subjects, items) = draw_items(volumes, &eval_opts, data.eval_items.max(1), &mut erng)?;
    let z0 = cache.latents(&subjects, &items, false, &mut erng)?;
    let eval = EvalSet {
        noised: draw_noised(&z0, &den.schedule, &mut erng)?,
        context: SliceBatch::from_items(&items)?.context()?,
    };
    let initial = eval_loss(&den.net, &Denoiser::new(config, settings.seed)?.params, &eval);

    let sched = WarmupSchedule {
        base: settings.lr,
        warmup: settings.warmup_steps,
    };
    let start = std::time::Instant::now();
    let mut last_good: Option<PathBuf> = None;
    while den.step < settings.steps {
        let step = den.step + 1;
        let mut rng = step_rng(settings.seed, step);
        let (subjects, items) = draw_items(volumes, &items_opts, settings.batch_size, &mut rng)?;
        let z0 = cache.latents(&subjects, &items, config.sample_posterior, &mut rng)?;
        let noised = draw_noised(&z0, &den.schedule, &mut rng)?;
        let context = SliceBatch::from_items(&items)?.context()?;
        let tape = Tape::new();
        let (loss, mut grads) = {
            let cx = Ctx::new(&tape, &den.params);
            let l = generative_loss_graph(&den.net, &cx, &noised, &context);
            (l.item(), tape.backward(l))
        };
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::Diverged {
                step,
                checkpoint: last_good,
            });
        }
        grads.scale_params(clip_factor(grads.param_norm(), settings.grad_clip));
        let lr = sched.lr(step);
        adam.update(&mut den.params, &grads, lr);
        ema.update(&mut den.ema, &den.params);
        den.step = step;
        den.history.push(LossRecord { step, loss, lr });
        if settings.log_every > 0 && step % settings.log_every == 0 {
            log::info!("diffusion step {step}: loss {loss:.6}");
        }
        if let (Some(dir), true) = (&extras.checkpoint_dir, settings.checkpoint_every > 0 && step % settings.checkpoint_every == 0) {
            let path = dir.join("diffusion_latest.ckpt");
            den.to_checkpoint(Some(settings), &ema, Some(&adam))?.save(&path)?;
            last_good = Some(path);
        }
    }
    if vae.checksum() != vae_checksum {
        return Err(Error::Contract("autoencoder parameters changed during diffusion training".into()));
    }
    if let Some(dir) = &extras.checkpoint_dir {
        den.to_checkpoint(Some(settings), &ema, Some(&adam))?.save(&dir.join("diffusion_latest.ckpt"))?;
    }
    let report = DiffusionReport {
        initial_eval_loss: initial,
        final_eval_loss_raw: eval_loss(&den.net, &den.params, &eval),
        final_eval_loss_ema: eval_loss(&den.net, &den.ema, &eval),
        steps: den.step,
        seconds: start.elapsed().as_secs_f64(),
        vae_checksum,
    };
    Ok((den, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dims: Dims) -> DenoiserConfig {
        DenoiserConfig {
            dims,
            latent_channels: 2,
            f: 2,
            base_channels: 4,
            channel_mults: vec![1, 2],
            attention_levels: vec![1],
            time_embed_dim: 8,
            context_base_channels: 4,
            context_latent_channels: 2,
            diffusion_steps: 50,
            ..DenoiserConfig::default()
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
        noise(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn zero_init_gate_is_exact() {
        let den = Denoiser::new(&tiny(Dims::Planar), 1).unwrap();
        let z = rand_tensor(&[2, 2, 1, 4, 4], 2);
        let prev = rand_tensor(&[2, 1, 1, 8, 8], 3);
        let next = rand_tensor(&[2, 1, 1, 8, 8], 4);
        let cond = den.condition(&prev, &next, &z, &[5, 40]).unwrap();
        assert!(cond.z_c.data().iter().all(|&v| v == 0.0));
        assert_eq!(cond.injection_features.len(), 2);
        assert!(cond.injection_features.iter().all(|f| f.data().iter().all(|&v| v == 0.0)));
        let a = den.predict_noise(&z, &[5, 40], &cond).unwrap();
        let b = den.predict_noise_unconditional(&z, &[5, 40]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), z.shape());
        let c = den.conditioned(&prev, &next).unwrap().predict(&z, 5).unwrap();
        assert_eq!(c, den.predict_noise_unconditional(&z, &[5, 5]).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let den = Denoiser::new(&tiny(Dims::Planar), 1).unwrap();
        let z = rand_tensor(&[1, 2, 1, 4, 4], 2);
        assert!(den.predict_noise_unconditional(&z, &[51]).is_err());
        assert!(den.predict_noise_unconditional(&rand_tensor(&[1, 3, 1, 4, 4], 2), &[1]).is_err());
        let prev = rand_tensor(&[1, 1, 1, 8, 8], 3);
        assert!(den.encode_context(&prev, &rand_tensor(&[1, 1, 1, 8, 6], 3)).is_err());
        assert!(den.inject_condition(&rand_tensor(&[1, 2, 1, 2, 2], 1), &z, &[1]).is_err());
    }

    #[test]
    fn oracle_predictor_has_zero_loss() {
        let mut vae = Vae::new(
            &crate::vae::VaeConfig {
                base_channels: 4,
                channel_mults: vec![1, 2],
                f: 2,
                latent_channels: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let batch = SliceBatch {
            prev: rand_tensor(&[2, 1, 1, 8, 8], 1),
            target: rand_tensor(&[2, 1, 1, 8, 8], 2),
            next: rand_tensor(&[2, 1, 1, 8, 8], 3),
        };
        let sched = NoiseSchedule::new(50, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generative_loss(&batch, &vae, &sched, false, &mut rng, |z, _, _| Ok(z.clone())).is_err());
        vae.freeze();
        let z0 = vae.latents(&batch.target).unwrap();
        let loss = generative_loss(&batch, &vae, &sched, false, &mut rng, |z, t, _| {
            let items: Vec<_> = (0..z.batch())
                .map(|i| {
                    let ab = sched.alpha_bar(t[i]);
                    z.item(i).zip_map(&z0.item(i), |zt, x0| ((zt as f64 - ab.sqrt() * x0 as f64) / (1.0 - ab).sqrt()) as f32)
                })
                .collect();
            Ok(Tensor::stack_batch(&items))
        })
        .unwrap();
        assert!(loss < 1e-8, "{loss}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut den = Denoiser::new(&tiny(Dims::Volumetric), 5).unwrap();
        den.ema.tensors_mut()[0].data_mut()[0] = 0.25;
        den.step = 7;
        let ck = den.to_checkpoint(None, &Ema::new(0.99), Some(&Adam::new(&den.params))).unwrap();
        let back = Denoiser::from_checkpoint(&Checkpoint::decode(&ck.encode().unwrap(), Path::new("mem")).unwrap()).unwrap();
        assert_eq!(back.params.checksum(), den.params.checksum());
        assert_eq!(back.ema.checksum(), den.ema.checksum());
        assert_eq!(back.step, 7);
    }
}
