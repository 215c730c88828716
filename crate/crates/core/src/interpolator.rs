//! Intermediate-slice generation and bisectional stack upsampling.
//!
//! A generation step takes two equally spaced source slices and produces
//! the slice halfway between them. In `calid` mode sampling starts from
//! seeded Gaussian noise. In `calid_plus` mode both sources are first
//! inverted into noise space with the conditional predictor and the start
//! point is their spherical midpoint, so the whole path is deterministic.
//! Stacks are densified level by level: all half positions, then all
//! quarter positions, and so on.

use crate::denoiser::Denoiser;
use crate::diffusion::{ddim_invert, ddim_sample, ddim_timesteps};
use crate::error::{Error, Result};
use crate::nn::Dims;
use crate::tensor::Tensor;
use crate::vae::{noise, Vae};
use crate::volume::{batch_tensor, Grid, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Calid,
    CalidPlus,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calid" => Ok(Self::Calid),
            "calid_plus" | "calid+" => Ok(Self::CalidPlus),
            other => Err(Error::invalid(format!("unknown mode {other:?} (expected calid or calid_plus)"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Calid => "calid",
            Self::CalidPlus => "calid_plus",
        })
    }
}

/// What each source slice is conditioned on while it is inverted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InversionContext {
    /// The source duplicated on both sides, so the conditioning pair sits at
    /// the same spacing from the source as during training.
    #[default]
    Source,
    /// The source's own neighbours at the current spacing, falling back to
    /// the source at stack boundaries.
    Neighbours,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub mode: Mode,
    pub ddim_steps: usize,
    /// Inversion step count for `calid_plus`; defaults to `ddim_steps`.
    pub invert_steps: Option<usize>,
    pub inversion_context: InversionContext,
    pub depth: usize,
    pub seed: u64,
    /// Condition every step on the enclosing original slices only.
    pub originals_only: bool,
    /// Maximum number of items per denoiser batch.
    pub batch_size: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Calid,
            ddim_steps: 8,
            invert_steps: None,
            inversion_context: InversionContext::Source,
            depth: 1,
            seed: 0,
            originals_only: false,
            batch_size: 32,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ddim_steps == 0 || self.invert_steps == Some(0) {
            return Err(Error::invalid("step counts must be at least 1"));
        }
        if self.depth == 0 {
            return Err(Error::invalid("bisection depth must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn invert_steps(&self) -> usize {
        self.invert_steps.unwrap_or(self.ddim_steps)
    }
}

const SLERP_MIN_ANGLE: f64 = 1e-4;
const SLERP_MIN_NORM: f64 = 1e-8;

/// Spherical interpolation between flattened tensors, falling back to
/// linear interpolation for nearly parallel or near-zero inputs.
pub fn slerp(a: &Tensor<f32>, b: &Tensor<f32>, alpha: f64) -> Result<Tensor<f32>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("slerp weight {alpha} outside [0, 1]")));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    let (wa, wb) = if na < SLERP_MIN_NORM || nb < SLERP_MIN_NORM {
        (1.0 - alpha, alpha)
    } else {
        let theta = (dot / (na * nb)).clamp(-1.0, 1.0).acos();
        if theta < SLERP_MIN_ANGLE {
            (1.0 - alpha, alpha)
        } else {
            let s = theta.sin();
            (((1.0 - alpha) * theta).sin() / s, (alpha * theta).sin() / s)
        }
    };
    Ok(a.zip_map(b, |x, y| (wa * x as f64 + wb * y as f64) as f32))
}

/// One generation step in dense-index units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStep {
    pub level: usize,
    pub target: usize,
    pub left: usize,
    pub right: usize,
}

/// Generation order for densifying `n_slices` by `2^depth`. Dense index
/// `i` sits at slice position `i / 2^depth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisectionPlan {
    pub n_slices: usize,
    pub depth: usize,
    pub steps: Vec<PlanStep>,
}

impl BisectionPlan {
    pub fn scale(&self) -> usize {
        1 << self.depth
    }

    pub fn dense_len(&self) -> usize {
        (self.n_slices - 1) * self.scale() + 1
    }

    pub fn position(&self, index: usize) -> f64 {
        index as f64 / self.scale() as f64
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.dense_len()).map(|i| self.position(i)).collect()
    }

    /// Dense indices holding original slices.
    pub fn original_indices(&self) -> Vec<usize> {
        (0..self.n_slices).map(|k| k * self.scale()).collect()
    }

    pub fn levels(&self) -> impl Iterator<Item = Vec<PlanStep>> + '_ {
        (1..=self.depth).map(|l| self.steps.iter().copied().filter(|s| s.level == l).collect())
    }

    /// Replays the plan, checking that every source exists before use and
    /// that every dense position is produced exactly once.
    pub fn check(&self) -> Result<()> {
        let mut have = vec![false; self.dense_len()];
        for i in self.original_indices() {
            have[i] = true;
        }
        for s in &self.steps {
            if s.left >= s.target || s.right <= s.target || s.right >= have.len() {
                return Err(Error::Contract(format!("sources do not bracket target: {s:?}")));
            }
            if !have[s.left] || !have[s.right] {
                return Err(Error::Contract(format!("step {s:?} uses a source that does not exist yet")));
            }
            if have[s.target] {
                return Err(Error::Contract(format!("position {} generated twice", s.target)));
            }
            have[s.target] = true;
        }
        if have.iter().any(|h| !h) {
            return Err(Error::Contract("plan leaves positions empty".into()));
        }
        Ok(())
    }
}

/// Level-order plan: every step conditions on its two nearest existing
/// neighbours at equal distance.
pub fn build_bisection_plan(n_slices: usize, depth: usize) -> Result<BisectionPlan> {
    build_plan(n_slices, depth, false)
}

/// Like [`build_bisection_plan`]; with `originals_only` every step instead
/// conditions on the two original slices enclosing it.
pub fn build_plan(n_slices: usize, depth: usize, originals_only: bool) -> Result<BisectionPlan> {
    if n_slices < 2 {
        return Err(Error::invalid(format!("need at least 2 slices, got {n_slices}")));
    }
    if depth == 0 || depth > 16 {
        return Err(Error::invalid(format!("bisection depth must lie in [1, 16], got {depth}")));
    }
    let scale = 1usize << depth;
    let dense = (n_slices - 1) * scale + 1;
    let mut steps = Vec::new();
    for level in 1..=depth {
        let half = scale >> level;
        for target in (half..dense).step_by(2 * half) {
            let (left, right) = if originals_only {
                (target / scale * scale, target.div_ceil(scale) * scale)
            } else {
                (target - half, target + half)
            };
            steps.push(PlanStep { level, target, left, right });
        }
    }
    let plan = BisectionPlan { n_slices, depth, steps };
    plan.check()?;
    Ok(plan)
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Noise seed of the step generating slice position `position`, independent
/// of execution order.
pub fn step_seed(run_seed: u64, position: f64, frame: usize) -> u64 {
    splitmix(splitmix(run_seed ^ position.to_bits()) ^ frame as u64)
}

/// Frozen autoencoder plus trained denoiser.
#[derive(Clone, Debug)]
pub struct CalidModel {
    pub vae: Vae,
    pub denoiser: Denoiser,
}

impl CalidModel {
    pub fn new(vae: Vae, denoiser: Denoiser) -> Result<Self> {
        let (v, d) = (vae.config(), denoiser.config());
        if v.latent_channels != d.latent_channels || v.f != d.f || v.dims != d.dims {
            return Err(Error::invalid("autoencoder and denoiser checkpoints are incompatible"));
        }
        denoiser.check_vae(&vae)?;
        Ok(Self { vae, denoiser })
    }

    pub fn dims(&self) -> Dims {
        self.denoiser.config().dims
    }
}

/// One requested intermediate slice. Every tensor is `[1, C, D, H, W]`.
/// The source contexts are the neighbour pairs each source is conditioned
/// on during `calid_plus` inversion.
#[derive(Clone, Debug)]
pub struct Request {
    pub prev: Tensor<f32>,
    pub next: Tensor<f32>,
    pub prev_context: (Tensor<f32>, Tensor<f32>),
    pub next_context: (Tensor<f32>, Tensor<f32>),
    pub seed: u64,
}

impl Request {
    /// Standalone pair: each source is conditioned on the pair itself.
    pub fn pair(prev: Tensor<f32>, next: Tensor<f32>, seed: u64) -> Self {
        Self {
            prev_context: (prev.clone(), next.clone()),
            next_context: (prev.clone(), next.clone()),
            prev,
            next,
            seed,
        }
    }
}

fn stack(ts: impl Iterator<Item = Tensor<f32>>) -> Tensor<f32> {
    Tensor::stack_batch(&ts.collect::<Vec<_>>())
}

/// Inverts clean latents `z0` (one per context pair) into noise space.
fn invert(model: &CalidModel, z0: &Tensor<f32>, prev: &Tensor<f32>, next: &Tensor<f32>, steps: usize) -> Result<Tensor<f32>> {
    let den = &model.denoiser;
    let mut up = ddim_timesteps(den.schedule.steps, steps)?;
    up.reverse();
    let cond = den.conditioned(prev, next)?;
    ddim_invert(z0, &up, &den.schedule, |z, t| cond.predict(z, t))
}

/// Generates the midpoint slice for every request in one batch, returning
/// `[B, C, D, H, W]` images clamped to `[0, 1]`.
pub fn generate_batch(model: &CalidModel, requests: &[Request], config: &InferenceConfig) -> Result<Tensor<f32>> {
    config.validate()?;
    if requests.is_empty() {
        return Err(Error::invalid("no generation requests"));
    }
    let shape = requests[0].prev.shape().to_vec();
    for r in requests {
        for t in [&r.prev, &r.next, &r.prev_context.0, &r.prev_context.1, &r.next_context.0, &r.next_context.1] {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
    }
    model.vae.net.check_input(&shape)?;
    let prev = stack(requests.iter().map(|r| r.prev.clone()));
    let next = stack(requests.iter().map(|r| r.next.clone()));
    let den = &model.denoiser;
    let lshape = model.vae.net.latent_shape(&shape);
    let z_t = match config.mode {
        Mode::Calid => stack(requests.iter().map(|r| noise(&lshape, &mut ChaCha8Rng::seed_from_u64(r.seed)))),
        Mode::CalidPlus => {
            let k = config.invert_steps();
            let side = |src: &Tensor<f32>, ctx: fn(&Request) -> &(Tensor<f32>, Tensor<f32>)| -> Result<Tensor<f32>> {
                let (a, b) = match config.inversion_context {
                    InversionContext::Source => (src.clone(), src.clone()),
                    InversionContext::Neighbours => (stack(requests.iter().map(|r| ctx(r).0.clone())), stack(requests.iter().map(|r| ctx(r).1.clone()))),
                };
                invert(model, &model.vae.latents(src)?, &a, &b, k)
            };
            let za = side(&prev, |r| &r.prev_context)?;
            let zb = side(&next, |r| &r.next_context)?;
            let mids = (0..requests.len())
                .map(|i| slerp(&za.item(i), &zb.item(i), 0.5))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack_batch(&mids)
        }
    };
    let cond = den.conditioned(&prev, &next)?;
    let down = ddim_timesteps(den.schedule.steps, config.ddim_steps)?;
    let z0 = ddim_sample(&z_t, &down, &den.schedule, |z, t| cond.predict(z, t))?;
    Ok(model.vae.decode_latents(&z0)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Single intermediate slice between two `[1, C, D, H, W]` slices.
pub fn generate_intermediate(model: &CalidModel, prev: &Tensor<f32>, next: &Tensor<f32>, config: &InferenceConfig) -> Result<Tensor<f32>> {
    let seed = step_seed(config.seed, 0.5, 0);
    generate_batch(model, &[Request::pair(prev.clone(), next.clone(), seed)], config)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpsampleReport {
    pub mode: Mode,
    pub ddim_steps: usize,
    pub invert_steps: usize,
    pub depth: usize,
    pub seed: u64,
    pub input_slices: usize,
    pub output_slices: usize,
    pub generated_slices: usize,
    /// Wall-clock seconds per bisection level.
    pub level_seconds: Vec<f64>,
    pub total_seconds: f64,
}

/// Dense slice buffer: one `[1, 1, D, H, W]` tensor per position and
/// generation unit (a frame for planar models, a whole block otherwise).
struct Dense {
    units: usize,
    slots: Vec<Vec<Option<Tensor<f32>>>>,
}

impl Dense {
    fn get(&self, index: usize, unit: usize) -> Result<&Tensor<f32>> {
        self.slots[index][unit]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("dense position {index} used before it was generated")))
    }
}

/// Densifies a stack by `2^depth` along the slice axis. Original slices are
/// copied through unchanged; planar models process each frame separately
/// and volumetric models whole `[T, H, W]` blocks.
pub fn upsample_stack(stack: &Volume, model: &CalidModel, config: &InferenceConfig) -> Result<(Volume, UpsampleReport)> {
    config.validate()?;
    let start = Instant::now();
    let g = stack.grid;
    let plan = build_plan(g.slices, config.depth, config.originals_only)?;
    let volumetric = model.dims() == Dims::Volumetric;
    let (units, depth) = if volumetric { (1, g.frame_count()) } else { (g.frame_count(), 1) };
    let unit_shape = [depth, g.height, g.width];
    let to_tensor = |data: &[f32]| batch_tensor(&[data], unit_shape);
    let mut dense = Dense {
        units,
        slots: vec![vec![None; units]; plan.dense_len()],
    };
    for (k, idx) in plan.original_indices().into_iter().enumerate() {
        for u in 0..units {
            let data = if volumetric { stack.block(k) } else { stack.image(k, u) };
            dense.slots[idx][u] = Some(to_tensor(data));
        }
    }
    let scale = plan.scale();
    let mut level_seconds = Vec::new();
    for steps in plan.levels() {
        let t0 = Instant::now();
        let spacing = 2 * (steps[0].target - steps[0].left);
        let mut work = Vec::new();
        for s in &steps {
            for u in 0..dense.units {
                work.push((*s, u));
            }
        }
        let mut inversion_context = HashMap::new();
        let mut context_of = |src: usize, u: usize| -> Result<(Tensor<f32>, Tensor<f32>)> {
            if let Some(c) = inversion_context.get(&(src, u)) {
                return Ok(Clone::clone(c));
            }
            // Neighbours at the source spacing when present, else the source
            // itself.
            let pick = |i: Option<usize>| -> Result<Tensor<f32>> {
                match i {
                    Some(i) if i < dense.slots.len() && dense.slots[i][u].is_some() => Ok(dense.get(i, u)?.clone()),
                    _ => Ok(dense.get(src, u)?.clone()),
                }
            };
            let step = if config.originals_only { scale } else { spacing };
            let c = (pick(src.checked_sub(step))?, pick(Some(src + step))?);
            inversion_context.insert((src, u), c.clone());
            Ok(c)
        };
        let mut requests = Vec::with_capacity(work.len());
        for &(s, u) in &work {
            requests.push(Request {
                prev: dense.get(s.left, u)?.clone(),
                next: dense.get(s.right, u)?.clone(),
                prev_context: context_of(s.left, u)?,
                next_context: context_of(s.right, u)?,
                seed: step_seed(config.seed, plan.position(s.target), u),
            });
        }
        let mut outputs = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(config.batch_size) {
            let out = generate_batch(model, chunk, config)?;
            outputs.extend((0..chunk.len()).map(|i| out.item(i)));
        }
        for ((s, u), out) in work.into_iter().zip(outputs) {
            dense.slots[s.target][u] = Some(out);
        }
        level_seconds.push(t0.elapsed().as_secs_f64());
    }

    let mut voxels = Vec::with_capacity(plan.dense_len() * g.frame_count() * g.plane());
    for i in 0..plan.dense_len() {
        for u in 0..dense.units {
            voxels.extend_from_slice(dense.get(i, u)?.data());
        }
    }
    let grid = Grid {
        slices: plan.dense_len(),
        ..g
    };
    let mut spacing = stack.spacing;
    spacing.slice /= scale as f64;
    let out = Volume::new(voxels, grid, spacing, stack.subject_id.clone())?;
    let report = UpsampleReport {
        mode: config.mode,
        ddim_steps: config.ddim_steps,
        invert_steps: config.invert_steps(),
        depth: config.depth,
        seed: config.seed,
        input_slices: g.slices,
        output_slices: plan.dense_len(),
        generated_slices: plan.steps.len(),
        level_seconds,
        total_seconds: start.elapsed().as_secs_f64(),
    };
    Ok((out, report))
}

/// Densifies a 2D+T sequence with a volumetric model; the temporal axis is
/// kept as is.
pub fn upsample_sequence(seq: &Volume, model: &CalidModel, config: &InferenceConfig) -> Result<(Volume, UpsampleReport)> {
    if model.dims() != Dims::Volumetric {
        return Err(Error::invalid("sequence upsampling needs a volumetric (dims = 3) checkpoint"));
    }
    if let Some(k) = model.denoiser.trained_frames {
        if seq.grid.frame_count() != k {
            return Err(Error::invalid(format!(
                "sequence has {} frames but the model was trained on {k}-frame blocks",
                seq.grid.frame_count()
            )));
        }
    }
    upsample_stack(seq, model, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::from_vec(&[1, v.len()], v.to_vec())
    }

    #[test]
    fn slerp_cases() {
        let a = t(&[1.0, 0.0]);
        let b = t(&[0.0, 1.0]);
        assert_eq!(slerp(&a, &b, 0.0).unwrap(), a);
        let m = slerp(&a, &b, 0.5).unwrap();
        let r = std::f32::consts::FRAC_1_SQRT_2;
        assert!((m.data()[0] - r).abs() < 1e-6 && (m.data()[1] - r).abs() < 1e-6);
        let e = slerp(&a, &b, 1.0).unwrap();
        assert!((e.data()[0]).abs() < 1e-6 && (e.data()[1] - 1.0).abs() < 1e-6);
        let z = t(&[0.0, 0.0]);
        assert_eq!(slerp(&z, &b, 0.25).unwrap(), t(&[0.0, 0.25]));
        assert!(slerp(&a, &t(&[1.0]), 0.5).is_err());
        assert!(slerp(&a, &b, 1.5).is_err());
    }

    #[test]
    fn plan_small_cases() {
        let p = build_bisection_plan(2, 1).unwrap();
        assert_eq!(p.positions(), vec![0.0, 0.5, 1.0]);
        assert_eq!(p.steps, vec![PlanStep { level: 1, target: 1, left: 0, right: 2 }]);
        let p = build_bisection_plan(3, 2).unwrap();
        assert_eq!(p.positions(), vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]);
        let targets: Vec<f64> = p.steps.iter().map(|s| p.position(s.target)).collect();
        assert_eq!(targets, vec![0.5, 1.5, 0.25, 0.75, 1.25, 1.75]);
        assert!(build_bisection_plan(1, 1).is_err());
        assert!(build_bisection_plan(4, 0).is_err());
    }

    #[test]
    fn originals_only_plan_uses_originals() {
        let p = build_plan(3, 2, true).unwrap();
        for s in &p.steps {
            assert_eq!(s.left % 4, 0);
            assert_eq!(s.right % 4, 0);
        }
    }

    #[test]
    fn step_seeds_depend_on_position() {
        assert_eq!(step_seed(1, 0.5, 0), step_seed(1, 0.5, 0));
        assert_ne!(step_seed(1, 0.5, 0), step_seed(1, 1.5, 0));
        assert_ne!(step_seed(1, 0.5, 0), step_seed(2, 0.5, 0));
        assert_ne!(step_seed(1, 0.5, 0), step_seed(1, 0.5, 1));
    }
}
