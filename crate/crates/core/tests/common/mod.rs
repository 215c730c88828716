//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use calid::denoiser::{generative_loss_graph, DenoiserConfig, DenoiserNet, Noised};
use calid::interpolator::BisectionPlan;
use calid::nn::{Builder, Dims};
use calid::tensor::{Ctx, Gradients, ParamStore, Tape, Tensor};
use calid::vae::{VaeConfig, VaeNet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeSet;

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    Tensor::from_vec(shape, (0..n).map(|_| d.sample(rng)).collect())
}

/// Adds small noise to every parameter so zero-initialised gates do not hide
/// sub-networks from a gradient check.
pub fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let d = Normal::new(0.0, 0.05).unwrap();
    for t in store.tensors_mut() {
        let data = t.data().iter().map(|&v| v + d.sample(rng)).collect();
        *t = Tensor::from_vec(t.shape(), data);
    }
}

pub fn all_grads(store: &ParamStore<f64>, g: &Gradients<f64>) -> Vec<Tensor<f64>> {
    store
        .names()
        .iter()
        .map(|name| {
            let id = store.id_of(name).unwrap();
            g.param(id).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
        })
        .collect()
}

/// Central differences on `picks` random scalars with a non-negligible
/// analytic gradient; returns the worst relative error.
pub fn finite_difference_check(
    store: &mut ParamStore<f64>,
    loss: impl Fn(&ParamStore<f64>) -> f64,
    grads: &[Tensor<f64>],
    picks: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let candidates: Vec<(usize, usize)> = grads
        .iter()
        .enumerate()
        .flat_map(|(p, g)| g.data().iter().enumerate().filter(|(_, v)| v.abs() > 1e-5).map(move |(i, _)| (p, i)))
        .collect();
    assert!(candidates.len() >= picks, "only {} usable parameters", candidates.len());
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..picks {
        let (p, i) = candidates[rng.random_range(0..candidates.len())];
        let orig = store.tensors()[p].data()[i];
        let mut at = |v: f64| {
            let mut data = store.tensors()[p].data().to_vec();
            data[i] = v;
            store.tensors_mut()[p] = Tensor::from_vec(store.tensors()[p].shape(), data);
            loss(store)
        };
        let numeric = (at(orig + h) - at(orig - h)) / (2.0 * h);
        at(orig);
        let analytic = grads[p].data()[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(rel.is_finite());
        worst = worst.max(rel);
    }
    worst
}

/// 2D surface by explicit 4-neighbour inspection.
pub fn surface2(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && mask[r as usize * w + c as usize];
    let mut out = Vec::new();
    for r in 0..h as isize {
        for c in 0..w as isize {
            if at(r, c) && (r == 0 || c == 0 || r + 1 == h as isize || c + 1 == w as isize || !at(r - 1, c) || !at(r + 1, c) || !at(r, c - 1) || !at(r, c + 1)) {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

/// Brute-force surface distances `(hd, asd_ab, asd_ba, assd)`; `None` when
/// either surface is empty.
pub fn surface_oracle(a: &[bool], b: &[bool], h: usize, w: usize, sy: f64, sx: f64) -> Option<(f64, f64, f64, f64)> {
    let (pa, pb) = (surface2(a, h, w), surface2(b, h, w));
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(r, c)| {
                to.iter()
                    .map(|&(r2, c2)| (((r as f64 - r2 as f64) * sy).powi(2) + ((c as f64 - c2 as f64) * sx).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let (ab, ba) = (directed(&pa, &pb), directed(&pb, &pa));
    let hd = ab.iter().chain(&ba).fold(0.0f64, |m, &v| m.max(v));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (x, y) = (mean(&ab), mean(&ba));
    Some((hd, x, y, 0.5 * (x + y)))
}

pub fn dice_oracle(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let total = (a.iter().filter(|x| **x).count() + b.iter().filter(|x| **x).count()) as f64;
    if total == 0.0 {
        1.0
    } else {
        2.0 * inter / total
    }
}

/// Random blob masks: unions of a few discs.
pub fn random_mask(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let discs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64), rng.random_range(1.0..(h.min(w) as f64 / 3.0).max(1.5))))
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            discs.iter().any(|&(cy, cx, r)| (y - cy).powi(2) + (x - cx).powi(2) <= r * r)
        })
        .collect()
}

/// Checks a plan against an exhaustive enumeration of dyadic positions:
/// position count, equidistant bracketing sources, valid dependency order
/// and every new position generated exactly once. Positions are handled as
/// exact rationals `k / 2^d`.
pub fn plan_oracle(plan: &BisectionPlan, n: usize, d: usize) -> Result<(), String> {
    let scale = 1usize << d;
    let all: BTreeSet<usize> = (0..=(n - 1) * scale).collect();
    if plan.dense_len() != (n - 1) * scale + 1 || plan.positions().len() != all.len() {
        return Err(format!("position count {} != {}", plan.positions().len(), all.len()));
    }
    for (i, &p) in plan.positions().iter().enumerate() {
        if p * scale as f64 != i as f64 {
            return Err(format!("position {i} is {p}"));
        }
    }
    let mut have: BTreeSet<usize> = (0..n).map(|k| k * scale).collect();
    let mut generated = BTreeSet::new();
    for s in &plan.steps {
        if s.left >= s.target || s.right <= s.target || s.target - s.left != s.right - s.target {
            return Err(format!("step {s:?} is not equidistant"));
        }
        if !have.contains(&s.left) || !have.contains(&s.right) {
            return Err(format!("step {s:?} runs before its sources exist"));
        }
        if !generated.insert(s.target) || have.contains(&s.target) {
            return Err(format!("position {} produced twice", s.target));
        }
        have.insert(s.target);
    }
    if have != all {
        return Err(format!("{} positions never produced", all.len() - have.len()));
    }
    Ok(())
}

/// Worst relative finite-difference error of the generative loss gradient
/// of a tiny jittered denoiser over `picks` parameters.
pub fn generative_loss_fd(dims: Dims, picks: usize, rng: &mut ChaCha8Rng) -> f64 {
    let cfg = DenoiserConfig {
        dims,
        latent_channels: 2,
        f: 2,
        base_channels: 4,
        channel_mults: vec![1, 2],
        attention_levels: vec![1],
        time_embed_dim: 8,
        context_base_channels: 4,
        context_latent_channels: 2,
        inject_decoder: true,
        diffusion_steps: 100,
        ..DenoiserConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let net = DenoiserNet::build(&cfg, &mut Builder::new(&mut store, rng)).unwrap();
    jitter(&mut store, rng);
    let d = if dims == Dims::Planar { 1 } else { 2 };
    let noised = Noised {
        t: vec![7, 63],
        eps: randn(&[2, 2, d, 4, 4], 1.0, rng),
        z_t: randn(&[2, 2, d, 4, 4], 1.0, rng),
    };
    let context = randn(&[2, 2, d, 8, 8], 0.3, rng);
    let loss = |s: &ParamStore<f64>| {
        let tape = Tape::inference();
        generative_loss_graph(&net, &Ctx::new(&tape, s), &noised, &context).item()
    };
    let tape = Tape::new();
    let g = {
        let l = generative_loss_graph(&net, &Ctx::new(&tape, &store), &noised, &context);
        tape.backward(l)
    };
    let grads = all_grads(&store, &g);
    finite_difference_check(&mut store, loss, &grads, picks, rng)
}

/// Same for the ELBO of a tiny jittered autoencoder.
pub fn elbo_fd(dims: Dims, picks: usize, rng: &mut ChaCha8Rng) -> f64 {
    let cfg = VaeConfig {
        dims,
        f: 2,
        latent_channels: 2,
        base_channels: 4,
        channel_mults: vec![1, 2],
        kl_weight: 1e-2,
        ..VaeConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let net = VaeNet::build(&cfg, &mut Builder::new(&mut store, rng)).unwrap();
    jitter(&mut store, rng);
    let d = if dims == Dims::Planar { 1 } else { 2 };
    let x = randn(&[2, 1, d, 8, 8], 0.3, rng).map(|v| v + 0.5);
    let eps = randn(&[2, 2, d, 4, 4], 1.0, rng);
    let loss = |s: &ParamStore<f64>| {
        let tape = Tape::inference();
        let cx = Ctx::new(&tape, s);
        net.elbo(&cx, cx.constant(x.clone()), eps.clone()).total.item()
    };
    let tape = Tape::new();
    let g = {
        let cx = Ctx::new(&tape, &store);
        let l = net.elbo(&cx, cx.constant(x.clone()), eps.clone()).total;
        tape.backward(l)
    };
    let grads = all_grads(&store, &g);
    finite_difference_check(&mut store, loss, &grads, picks, rng)
}
