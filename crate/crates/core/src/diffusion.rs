//! Noise schedules, forward corruption and the DDPM / DDIM reverse updates.
//!
//! All schedule quantities use the cumulative signal coefficient
//! `alpha_bar[t]`, with `alpha_bar[0] = 1`.

use crate::error::{check_shape, Error, Result};
use crate::tensor::{Real, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    /// Number of diffusion steps `T`.
    pub steps: usize,
    /// `alpha_bar[t]` for `t = 0..=T`.
    pub alpha_bar: Vec<f64>,
    /// Ancestral-sampling noise scale for each `t` (`sigma[0] = 0`).
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let alpha_bar = match kind {
            ScheduleKind::Linear => linear_alpha_bar(steps),
            ScheduleKind::Cosine => cosine_alpha_bar(steps),
        };
        let mut sigma = vec![0.0; steps + 1];
        for t in 1..=steps {
            let (ab, prev) = (alpha_bar[t], alpha_bar[t - 1]);
            sigma[t] = ((1.0 - prev) / (1.0 - ab)).sqrt() * (1.0 - ab / prev).sqrt();
        }
        Ok(Self {
            kind,
            steps,
            alpha_bar,
            sigma,
        })
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps {
            Err(Error::invalid(format!("step {t} outside [0, {}]", self.steps)))
        } else {
            Ok(())
        }
    }
}

/// Per-step betas linearly spaced between `1e-4` and `0.02`, both rescaled by
/// `1000 / T` and clipped below 1.
fn linear_alpha_bar(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let (b0, b1) = (1e-4 * scale, 0.02 * scale);
    let mut out = Vec::with_capacity(steps + 1);
    out.push(1.0);
    let mut acc = 1.0;
    for i in 0..steps {
        let beta = if steps == 1 {
            b1
        } else {
            b0 + (b1 - b0) * i as f64 / (steps - 1) as f64
        };
        acc *= 1.0 - beta.min(0.9999);
        out.push(acc);
    }
    out
}

pub fn cosine_alpha_bar_at(t: usize, steps: usize) -> f64 {
    let s = COSINE_OFFSET;
    let f = |x: f64| ((x + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t as f64 / steps as f64) / f(0.0)
}

fn cosine_alpha_bar(steps: usize) -> Vec<f64> {
    (0..=steps).map(|t| cosine_alpha_bar_at(t, steps)).collect()
}

/// `z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps`.
pub fn forward_sample<S: Real>(z0: &Tensor<S>, t: usize, eps: &Tensor<S>, sched: &NoiseSchedule) -> Result<Tensor<S>> {
    check_shape(z0.shape(), eps.shape())?;
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (S::of(ab.sqrt()), S::of((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + b * e))
}

/// Estimate of the clean latent given a noise prediction.
pub fn predict_x0<S: Real>(z: &Tensor<S>, eps: &Tensor<S>, ab: f64) -> Tensor<S> {
    let (a, b) = (S::of(1.0 / ab.sqrt()), S::of((1.0 - ab).sqrt()));
    z.zip_map(eps, |z, e| (z - b * e) * a)
}

/// Deterministic move from noise level `ab_t` to `ab_next` (either direction).
pub fn ddim_update<S: Real>(z: &Tensor<S>, ab_t: f64, ab_next: f64, eps: &Tensor<S>) -> Tensor<S> {
    let x0 = predict_x0(z, eps, ab_t);
    let (a, b) = (S::of(ab_next.sqrt()), S::of((1.0 - ab_next).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One deterministic DDIM step `t -> t_prev`.
pub fn ddim_step<S: Real>(
    z_t: &Tensor<S>,
    t: usize,
    t_prev: usize,
    eps_hat: &Tensor<S>,
    sched: &NoiseSchedule,
) -> Result<Tensor<S>> {
    check_shape(z_t.shape(), eps_hat.shape())?;
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("ddim step requires t_prev < t, got {t_prev} >= {t}")));
    }
    Ok(ddim_update(z_t, sched.alpha_bar(t), sched.alpha_bar(t_prev), eps_hat))
}

/// One ancestral step `t -> t-1` with the schedule's own `sigma[t]`.
pub fn ddpm_step<S: Real, R: Rng>(
    x_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<S>> {
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::invalid("ddpm step requires t >= 1"));
    }
    ddpm_step_sigma(x_t, t, eps_hat, sched.sigma[t], sched, rng)
}

/// Ancestral step with an explicit noise scale.
pub fn ddpm_step_sigma<S: Real, R: Rng>(
    x_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    sigma: f64,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<S>> {
    check_shape(x_t.shape(), eps_hat.shape())?;
    sched.check_t(t)?;
    if t == 0 {
        return Err(Error::invalid("ddpm step requires t >= 1"));
    }
    let (ab_t, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t - 1));
    let dir_var = 1.0 - ab_prev - sigma * sigma;
    if dir_var < 0.0 || sigma < 0.0 {
        return Err(Error::invalid(format!(
            "sigma {sigma} too large at t={t}: 1 - alpha_bar_prev - sigma^2 = {dir_var}"
        )));
    }
    let x0 = predict_x0(x_t, eps_hat, ab_t);
    let (a, b, s) = (S::of(ab_prev.sqrt()), S::of(dir_var.sqrt()), S::of(sigma));
    let mut out = x0.zip_map(eps_hat, |x, e| a * x + b * e);
    if sigma > 0.0 {
        for v in out.data_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += s * S::of(n);
        }
    }
    Ok(out)
}

/// `n` uniformly strided step indices from `T` down to 0 (length `n + 1`).
pub fn ddim_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::invalid(format!("step count {n} must lie in [1, {total}]")));
    }
    Ok((0..=n)
        .map(|i| (total as f64 * (1.0 - i as f64 / n as f64)).round() as usize)
        .collect())
}

fn check_descending(steps: &[usize], total: usize) -> Result<()> {
    if steps.len() < 2 || steps[0] != total || *steps.last().unwrap() != 0 {
        return Err(Error::invalid(format!("step list must run from {total} to 0: {steps:?}")));
    }
    if steps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid(format!("step list must be strictly decreasing: {steps:?}")));
    }
    Ok(())
}

/// Iterated DDIM steps along `steps` (strictly decreasing, `T` to 0).
pub fn ddim_sample<S: Real, F>(z_t: &Tensor<S>, steps: &[usize], sched: &NoiseSchedule, mut predict: F) -> Result<Tensor<S>>
where
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
{
    check_descending(steps, sched.steps)?;
    let mut z = z_t.clone();
    for w in steps.windows(2) {
        let eps = predict(&z, w[0])?;
        z = ddim_step(&z, w[0], w[1], &eps, sched)?;
    }
    Ok(z)
}

/// Deterministic encoding of a clean latent into noise space along `steps`
/// (strictly increasing, 0 to `T`). The noise prediction is taken at the
/// current state before each move.
pub fn ddim_invert<S: Real, F>(z0: &Tensor<S>, steps: &[usize], sched: &NoiseSchedule, mut predict: F) -> Result<Tensor<S>>
where
    F: FnMut(&Tensor<S>, usize) -> Result<Tensor<S>>,
{
    let rev: Vec<usize> = steps.iter().rev().copied().collect();
    if check_descending(&rev, sched.steps).is_err() {
        return Err(Error::invalid(format!("inversion steps must rise strictly from 0 to {}: {steps:?}", sched.steps)));
    }
    let mut z = z0.clone();
    for w in steps.windows(2) {
        let eps = predict(&z, w[0])?;
        check_shape(z.shape(), eps.shape())?;
        z = ddim_update(&z, sched.alpha_bar(w[0]), sched.alpha_bar(w[1]), &eps);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
    }

    #[test]
    fn linear_schedule_invariants() {
        for t in [1, 2, 10, 100, 1000] {
            let s = NoiseSchedule::new(t, ScheduleKind::Linear).unwrap();
            assert_eq!(s.alpha_bar[0], 1.0);
            assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            assert!(s.alpha_bar[t] <= 1e-3, "T={t}: {}", s.alpha_bar[t]);
            assert!(s.sigma.iter().all(|&x| x >= 0.0));
        }
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn cosine_matches_closed_form() {
        let s = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let sc = 0.008;
        let half_pi = std::f64::consts::PI / 2.0;
        let den = (sc * std::f64::consts::PI / (2.0 * (1.0 + sc))).cos().powi(2);
        for t in 0..=100 {
            let x = t as f64 / 100.0;
            let want = ((x + sc) / (1.0 + sc) * half_pi).cos().powi(2) / den;
            assert!((s.alpha_bar[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn timesteps_are_strictly_decreasing() {
        for n in [1, 2, 7, 8, 128, 1000] {
            let ts = ddim_timesteps(1000, n).unwrap();
            assert_eq!(ts.len(), n + 1);
            assert_eq!((ts[0], ts[n]), (1000, 0));
            assert!(ts.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(ddim_timesteps(10, 11).is_err());
        assert_eq!(ddim_timesteps(100, 4).unwrap(), vec![100, 75, 50, 25, 0]);
    }

    #[test]
    fn exact_noise_recovers_z0() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
        let z0 = randn(&[2, 4, 1, 3, 3], &mut rng);
        let eps = randn(&[2, 4, 1, 3, 3], &mut rng);
        for t in [1, 10, 500, 1000] {
            let zt = forward_sample(&z0, t, &eps, &s).unwrap();
            let back = ddim_step(&zt, t, 0, &eps, &s).unwrap();
            for (a, b) in back.data().iter().zip(z0.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
        assert_eq!(forward_sample(&z0, 0, &eps, &s).unwrap(), z0);
        let one = ddim_sample(&forward_sample(&z0, 1000, &eps, &s).unwrap(), &[1000, 0], &s, |_, _| Ok(eps.clone())).unwrap();
        assert!(one.zip_map(&z0, |a, b| a - b).sq_norm().sqrt() < 1e-5);
    }

    #[test]
    fn ddpm_with_zero_sigma_is_ddim() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = NoiseSchedule::new(100, ScheduleKind::Linear).unwrap();
        let x = randn(&[1, 2, 1, 4, 4], &mut rng);
        let e = randn(&[1, 2, 1, 4, 4], &mut rng);
        for t in 1..=100 {
            let a = ddpm_step_sigma(&x, t, &e, 0.0, &s, &mut rng).unwrap();
            let b = ddim_step(&x, t, t - 1, &e, &s).unwrap();
            assert_eq!(a, b);
        }
        assert!(ddpm_step_sigma(&x, 5, &e, 2.0, &s, &mut rng).is_err());
        assert!(ddim_step(&x, 5, 5, &e, &s).is_err());
    }

    #[test]
    fn inversion_with_zero_predictor_telescopes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = NoiseSchedule::new(100, ScheduleKind::Linear).unwrap();
        let z0 = randn(&[1, 3, 1, 2, 2], &mut rng);
        let mut steps = ddim_timesteps(100, 10).unwrap();
        steps.reverse();
        let zt = ddim_invert(&z0, &steps, &s, |z, _| Ok(Tensor::zeros(z.shape()))).unwrap();
        let k = s.alpha_bar[100].sqrt();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert!((a - b * k).abs() < 1e-12 * (1.0 + b.abs()));
        }
        assert!(ddim_invert(&z0, &[0, 50], &s, |z, _| Ok(Tensor::zeros(z.shape()))).is_err());
    }
}
