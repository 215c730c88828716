use calid::denoiser::{DenoiserConfig, DenoiserNet};
use calid::diffusion::{ddim_step, ddpm_step_sigma, forward_sample, NoiseSchedule, ScheduleKind};
use calid::interpolator::{build_bisection_plan, build_plan, slerp};
use calid::io::rawtensor::{RawData, RawTensor};
use calid::metrics::{asd, assd, dice, hausdorff, rfid, MaskGrid, MetricReport};
use calid::nn::{inflate_planar, Builder, Dims, Inflation};
use calid::phantom::{generate_phantom, PhantomSpec};
use calid::tensor::{Ctx, ParamStore, Tape, Tensor};
use calid::vae::{kl_divergence, Vae, VaeConfig, VaeNet};
use calid::volume::{sample_training_item, ItemOptions};
use common::{dice_oracle, plan_oracle, random_mask, randn, surface_oracle};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

mod common;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn f32_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    randn(shape, 1.0, &mut rng(seed)).cast()
}

fn spec(size_pow: u32, slices: usize, frames: usize, noise: f64, seed: u64) -> PhantomSpec {
    PhantomSpec::random(1 << size_pow, slices, frames, noise, &mut rng(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phantoms_are_pure_bounded_and_nested(pow in 4u32..6, slices in 3usize..7, frames in 1usize..3, noise in 0.0f64..0.2, seed in any::<u64>()) {
        let s = spec(pow, slices, frames, noise, seed);
        let (v, m) = generate_phantom(&s, seed).unwrap();
        prop_assert_eq!(&generate_phantom(&s, seed).unwrap().0.voxels, &v.voxels);
        prop_assert!(v.voxels.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert!(v.spacing.in_plane > 0.0 && v.spacing.slice > 0.0);
        let n = v.grid.height;
        for i in 0..m.lvc.len() {
            prop_assert!(!(m.lvc[i] && m.lvm[i]) && !(m.lvc[i] && m.rvc[i]) && !(m.lvm[i] && m.rvc[i]));
            // Every face neighbour of the cavity is cavity or myocardium.
            if m.lvc[i] {
                let (r, c) = ((i / n) % n, i % n);
                for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (r2, c2) = (r as i64 + dr, c as i64 + dc);
                    if (0..n as i64).contains(&r2) && (0..n as i64).contains(&c2) {
                        let j = i - r * n - c + r2 as usize * n + c2 as usize;
                        prop_assert!(m.lvc[j] || m.lvm[j], "cavity touches background at {}", i);
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected(pow in 0u32..4, seed in any::<u64>()) {
        prop_assert!(spec(pow, 6, 1, 0.0, seed).validate().is_err());
        prop_assert!(spec(5, 2, 1, 0.0, seed).validate().is_err());
        prop_assert!(spec(5, 6, 1, 0.3, seed).validate().is_err());
    }

    #[test]
    fn training_items_bracket_their_target(slices in 3usize..9, seed in any::<u64>(), temporal in any::<bool>()) {
        let (v, _) = generate_phantom(&spec(4, slices, 3, 0.05, seed), seed).unwrap();
        let opts = ItemOptions { temporal, ..Default::default() };
        let mut r = rng(seed);
        for _ in 0..8 {
            let it = sample_training_item(&v, &opts, &mut r).unwrap();
            prop_assert!(it.index >= 1 && it.index + 1 < slices);
            let flip = |z: usize| calid::volume::extract_block(&v, z, &it.frames, it.flip_h, it.flip_v);
            prop_assert_eq!(&it.prev, &flip(it.index - 1));
            prop_assert_eq!(&it.next, &flip(it.index + 1));
            prop_assert_eq!(&it.target, &flip(it.index));
        }
    }

    #[test]
    fn rawtensor_round_trips(dims in prop::collection::vec(1usize..5, 1..5), kind in 0u8..4, seed in any::<u64>()) {
        let n: usize = dims.iter().product();
        let vals = randn(&[n], 10.0, &mut rng(seed));
        let data = match kind {
            0 => RawData::F32(vals.data().iter().map(|&v| v as f32).collect()),
            1 => RawData::F64(vals.data().to_vec()),
            2 => RawData::U8(vals.data().iter().map(|&v| v.abs() as u8).collect()),
            _ => RawData::U32(vals.data().iter().map(|&v| (v.abs() * 1e6) as u32).collect()),
        };
        let t = RawTensor::new(dims, data).unwrap();
        let back = RawTensor::decode(&t.encode().unwrap(), Path::new("mem")).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-3.0f64..3.0, 1..20), seed in any::<u64>()) {
        let lv: Vec<f64> = randn(&[mu.len()], 1.0, &mut rng(seed)).data().to_vec();
        prop_assert!(kl_divergence(&mu, &lv) >= 0.0);
        let zeros = vec![0.0; mu.len()];
        prop_assert_eq!(kl_divergence(&zeros, &zeros), 0.0);
        if mu.iter().any(|&m| m != 0.0) {
            prop_assert!(kl_divergence(&mu, &zeros) > 0.0);
        }
    }

    #[test]
    fn schedules_are_monotone(steps in 1usize..400, cosine in any::<bool>()) {
        let s = NoiseSchedule::new(steps, if cosine { ScheduleKind::Cosine } else { ScheduleKind::Linear }).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.sigma.iter().all(|&v| v >= 0.0));
        prop_assert!(s.alpha_bar(steps) <= 1e-3, "{}", s.alpha_bar(steps));
    }

    #[test]
    fn zero_sigma_ancestral_step_is_ddim(t in 1usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear).unwrap();
        let z = randn(&[1, 2, 1, 3, 3], 1.0, &mut rng(seed));
        let e = randn(&[1, 2, 1, 3, 3], 1.0, &mut rng(seed ^ 1));
        let a = ddpm_step_sigma(&z, t, &e, 0.0, &s, &mut rng(0)).unwrap();
        let b = ddim_step(&z, t, t - 1, &e, &s).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn ddim_step_inverts_forward_with_true_noise(t in 1usize..1000, seed in any::<u64>()) {
        let s = NoiseSchedule::new(1000, ScheduleKind::Cosine).unwrap();
        let z0 = randn(&[1, 2, 1, 4, 4], 1.0, &mut rng(seed));
        let e = randn(&[1, 2, 1, 4, 4], 1.0, &mut rng(!seed));
        let zt = forward_sample(&z0, t, &e, &s).unwrap();
        let back = ddim_step(&zt, t, 0, &e, &s).unwrap();
        for (x, y) in back.data().iter().zip(z0.data()) {
            prop_assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()) / s.alpha_bar(t).sqrt());
        }
    }

    #[test]
    fn slerp_properties(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let a = f32_tensor(&[1, 4, 1, 4, 4], seed);
        let b = f32_tensor(&[1, 4, 1, 4, 4], !seed);
        let norm = |t: &Tensor<f32>| t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let b_eq = b.map(|v| v * (norm(&a) / norm(&b)) as f32);
        let m = slerp(&a, &b_eq, alpha).unwrap();
        prop_assert!((norm(&m) - norm(&a)).abs() <= 1e-5 * norm(&a));
        let (x, y) = (slerp(&a, &b, 0.5).unwrap(), slerp(&b, &a, 0.5).unwrap());
        prop_assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() <= 1e-6));
        prop_assert!(slerp(&a, &b, 0.0).unwrap().data().iter().zip(a.data()).all(|(p, q)| (p - q).abs() <= 1e-6));
        let par = slerp(&a, &a.map(|v| 2.0 * v), alpha).unwrap();
        prop_assert!(par.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn plans_match_enumeration(n in 2usize..17, d in 1usize..5) {
        let p = build_bisection_plan(n, d).unwrap();
        prop_assert_eq!(plan_oracle(&p, n, d), Ok(()));
        prop_assert_eq!(p.steps.len(), (n - 1) * ((1 << d) - 1));
        build_plan(n, d, true).unwrap().check().unwrap();
    }

    #[test]
    fn rfid_of_identical_sets_is_zero(n in 2usize..20, dim in 1usize..12, seed in any::<u64>()) {
        let set: Vec<Vec<f64>> = (0..n).map(|i| randn(&[dim], 1.0, &mut rng(seed ^ i as u64)).data().to_vec()).collect();
        let scale: f64 = set.iter().flatten().map(|v| v * v).sum::<f64>() / n as f64;
        prop_assert!(rfid(&set, &set).unwrap().abs() <= 1e-6 * (1.0 + scale));
    }

    #[test]
    fn surface_metrics_match_brute_force(h in 4usize..33, w in 4usize..33, sy in 0.5f64..2.0, sx in 0.5f64..2.0, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b) = (random_mask(h, w, &mut r), random_mask(h, w, &mut r));
        let grid = MaskGrid::new(vec![h, w], vec![sy, sx]).unwrap();
        prop_assert!((dice(&a, &b).unwrap() - dice_oracle(&a, &b)).abs() <= 1e-12);
        if let Some((hd, ab, ba, sym)) = surface_oracle(&a, &b, h, w, sy, sx) {
            prop_assert!((hausdorff(&a, &b, &grid).unwrap() - hd).abs() <= 1e-9);
            prop_assert!((asd(&a, &b, &grid).unwrap() - ab).abs() <= 1e-9);
            prop_assert!((asd(&b, &a, &grid).unwrap() - ba).abs() <= 1e-9);
            prop_assert!((assd(&a, &b, &grid).unwrap() - sym).abs() <= 1e-9);
        }
    }

    #[test]
    fn aggregates_are_arithmetic_means(vals in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let mut r = MetricReport::default();
        for (i, v) in vals.iter().enumerate() {
            r.push(format!("c{i}"), "m", "x", *v);
        }
        let a = &r.aggregate()[0];
        prop_assert_eq!(a.count, vals.len());
        prop_assert!((a.mean - vals.iter().sum::<f64>() / vals.len() as f64).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn vae_shapes_hold_for_sizes_divisible_by_f(hk in 1usize..4, wk in 1usize..4, fpow in 1u32..3, volumetric in any::<bool>(), seed in any::<u64>()) {
        let f = 1usize << fpow;
        let dims = if volumetric { Dims::Volumetric } else { Dims::Planar };
        let cfg = VaeConfig { dims, f, latent_channels: 3, base_channels: 4, channel_mults: vec![1; fpow as usize + 1], ..Default::default() };
        let vae = Vae::new(&cfg, seed).unwrap();
        let d = if volumetric { 3 } else { 1 };
        let (h, w) = (hk * f * 2, wk * f);
        let x = f32_tensor(&[2, 1, d, h, w], seed).map(|v| v.abs().min(1.0));
        let dist = vae.encode(&x).unwrap();
        prop_assert_eq!(dist.mu.shape(), &[2, 3, d, h / f, w / f][..]);
        prop_assert_eq!(dist.mu.shape(), dist.logvar.shape());
        prop_assert!(dist.logvar.data().iter().all(|v| v.is_finite() && v.exp() > 0.0));
        let decoded = vae.decode(&dist.mu).unwrap();
        prop_assert_eq!(decoded.shape(), x.shape());
        prop_assert!(vae.encode(&f32_tensor(&[1, 1, d, h + 1, w], seed)).is_err());
    }
}

#[test]
fn volumetric_builds_reduce_to_planar_on_single_frames() {
    let mut r = rng(5);
    let vcfg = |dims| VaeConfig { dims, f: 2, latent_channels: 2, base_channels: 4, channel_mults: vec![1, 2], ..Default::default() };
    let (mut p2, mut p3) = (ParamStore::<f64>::new(), ParamStore::<f64>::new());
    let n2 = VaeNet::build(&vcfg(Dims::Planar), &mut Builder::new(&mut p2, &mut r)).unwrap();
    let n3 = VaeNet::build(&vcfg(Dims::Volumetric), &mut Builder::new(&mut p3, &mut r)).unwrap();
    inflate_planar(&p2, &mut p3, Inflation::Broadcast).unwrap();
    let x = randn(&[2, 1, 1, 8, 8], 0.5, &mut r);
    let tape = Tape::inference();
    let run = |net: &VaeNet, p: &ParamStore<f64>| {
        let cx = Ctx::new(&tape, p);
        let (mu, _) = net.encode(&cx, cx.constant(x.clone()));
        (mu.tensor(), net.decode(&cx, mu).tensor())
    };
    let (a, b) = (run(&n2, &p2), run(&n3, &p3));
    assert_close(&a.0, &b.0);
    assert_close(&a.1, &b.1);

    let dcfg = |dims| DenoiserConfig {
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
    };
    let (mut q2, mut q3) = (ParamStore::<f64>::new(), ParamStore::<f64>::new());
    let d2 = DenoiserNet::build(&dcfg(Dims::Planar), &mut Builder::new(&mut q2, &mut r)).unwrap();
    let d3 = DenoiserNet::build(&dcfg(Dims::Volumetric), &mut Builder::new(&mut q3, &mut r)).unwrap();
    // Zero-initialised gates would otherwise hide whole branches.
    common::jitter(&mut q2, &mut r);
    inflate_planar(&q2, &mut q3, Inflation::Broadcast).unwrap();
    let z = randn(&[2, 2, 1, 4, 4], 1.0, &mut r);
    let ctx = randn(&[2, 2, 1, 8, 8], 0.5, &mut r);
    let run = |net: &DenoiserNet, p: &ParamStore<f64>| {
        let cx = Ctx::new(&tape, p);
        net.forward(&cx, cx.constant(z.clone()), &[3.0, 40.0], cx.constant(ctx.clone())).tensor()
    };
    assert_close(&run(&d2, &q2), &run(&d3, &q3));
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>) {
    assert_eq!(a.shape(), b.shape());
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-10, "max difference {worst}");
}
