//! Image-quality, distribution, overlap and timing metrics.

mod features;
mod report;
mod surface;

pub use features::{FeatureExtractor, GradientPyramid, Provenance, VaeFeatures};
pub use report::{Aggregate, CaseValue, MetricReport, RunMeta};
pub use surface::{assd, asd, dice, directed_surface_distances, hausdorff, surface, MaskGrid};

use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Value returned by [`psnr`] for identical inputs.
pub const PSNR_CAP: f64 = 100.0;

fn same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape {
            expected: vec![a],
            got: vec![b],
        })
    }
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(x: &[f32], y: &[f32], data_range: f64) -> Result<f64> {
    same_len(x.len(), y.len())?;
    if !(data_range > 0.0) {
        return Err(Error::invalid("data_range must be positive"));
    }
    if x.is_empty() {
        return Err(Error::invalid("psnr of empty images"));
    }
    let mse = x
        .iter()
        .zip(y)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 7;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let c = (SSIM_WIN / 2) as f64;
    let mut w = [0.0; SSIM_WIN];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filtering restricted to fully covered windows.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of two `h × w` images with data range 1
/// (7×7 Gaussian window, σ = 1.5, k1 = 0.01, k2 = 0.03).
pub fn ssim(x: &[f32], y: &[f32], h: usize, w: usize) -> Result<f64> {
    same_len(x.len(), y.len())?;
    same_len(h * w, x.len())?;
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::invalid(format!("image {h}x{w} smaller than the {SSIM_WIN}x{SSIM_WIN} window")));
    }
    let k = gaussian_window();
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(&xf, h, w, &k);
    let my = filter_valid(&yf, h, w, &k);
    let sxx = filter_valid(&prod(&xf, &xf), h, w, &k);
    let syy = filter_valid(&prod(&yf, &yf), h, w, &k);
    let sxy = filter_valid(&prod(&xf, &yf), h, w, &k);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// SSIM of `[T, H, W]` sequences, averaged over frames.
pub fn ssim_frames(x: &[f32], y: &[f32], frames: usize, h: usize, w: usize) -> Result<f64> {
    same_len(x.len(), y.len())?;
    same_len(frames * h * w, x.len())?;
    let p = h * w;
    let mut s = 0.0;
    for t in 0..frames {
        s += ssim(&x[t * p..(t + 1) * p], &y[t * p..(t + 1) * p], h, w)?;
    }
    Ok(s / frames as f64)
}

/// L2 distance between unit-normalised feature vectors, in `[0, 2]`.
pub fn perceptual_distance(x: &[f32], y: &[f32], h: usize, w: usize, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let fx = extractor.features(x, h, w)?;
    let fy = extractor.features(y, h, w)?;
    same_len(fx.len(), fy.len())?;
    let unit = |f: &[f64]| {
        let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        f.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect::<Vec<_>>()
    };
    let (ux, uy) = (unit(&fx), unit(&fy));
    Ok(ux.iter().zip(&uy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
}

fn mean_cov(set: &[Vec<f64>], dim: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mean = vec![0.0; dim];
    for v in set {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for v in set {
        for i in 0..dim {
            let di = v[i] - mean[i];
            for j in i..dim {
                cov[(i, j)] += di * (v[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let c = cov[(i, j)] / (n - 1.0);
            cov[(i, j)] = c;
            cov[(j, i)] = c;
        }
    }
    if set.len() <= dim {
        // Too few samples for a full-rank estimate: shrink toward the
        // scaled identity.
        let lambda = 1e-6 * (cov.trace() / dim as f64).max(1e-12);
        for i in 0..dim {
            cov[(i, i)] += lambda;
        }
    }
    (mean, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&d) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|² + tr(S_a + S_b - 2 (S_a S_b)^½)`, with the trace term
/// computed from the symmetric product `S_a^½ S_b S_a^½`.
pub fn rfid(set_a: &[Vec<f64>], set_b: &[Vec<f64>]) -> Result<f64> {
    if set_a.len() < 2 || set_b.len() < 2 {
        return Err(Error::invalid("rfid needs at least two samples per set"));
    }
    let dim = set_a[0].len();
    if dim == 0 || set_a.iter().chain(set_b).any(|v| v.len() != dim) {
        return Err(Error::invalid("feature vectors must share one positive dimension"));
    }
    let (ma, ca) = mean_cov(set_a, dim);
    let (mb, cb) = mean_cov(set_b, dim);
    let mean_term: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b).powi(2)).sum();
    let sa = sym_sqrt(&ca);
    let mut prod = &sa * &cb * &sa;
    prod = (&prod + prod.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(prod).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((mean_term + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

/// Mean absolute frame-to-frame change along the centre row and centre
/// column of a `[T, H, W]` sequence (lower is smoother).
pub fn temporal_consistency(seq: &[f32], frames: usize, h: usize, w: usize) -> Result<f64> {
    temporal_consistency_at(seq, frames, h, w, h / 2, w / 2)
}

/// [`temporal_consistency`] along row `row` and column `col`.
pub fn temporal_consistency_at(seq: &[f32], frames: usize, h: usize, w: usize, row: usize, col: usize) -> Result<f64> {
    if frames < 2 {
        return Err(Error::invalid("temporal consistency needs at least two frames"));
    }
    same_len(frames * h * w, seq.len())?;
    if row >= h || col >= w {
        return Err(Error::invalid("cross-section outside the image"));
    }
    let p = h * w;
    let mut row_tv = 0.0;
    let mut col_tv = 0.0;
    for t in 0..frames - 1 {
        let (a, b) = (&seq[t * p..(t + 1) * p], &seq[(t + 1) * p..(t + 2) * p]);
        for x in 0..w {
            row_tv += (b[row * w + x] as f64 - a[row * w + x] as f64).abs();
        }
        for y in 0..h {
            col_tv += (b[y * w + col] as f64 - a[y * w + col] as f64).abs();
        }
    }
    let steps = (frames - 1) as f64;
    Ok(0.5 * (row_tv / (steps * w as f64) + col_tv / (steps * h as f64)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean: f64,
    pub std: f64,
    /// Seconds per call, warmup excluded.
    pub per_call: Vec<f64>,
    pub steps: Option<usize>,
    pub device: String,
}

/// Short description of the execution device.
pub fn device_description() -> String {
    let threads = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let mode = if crate::parallel::is_parallel() { "parallel" } else { "sequential" };
    format!("cpu ({threads} threads, {mode})")
}

/// Wall-clock statistics of `reps` calls after one excluded warmup call.
pub fn time_generation<F: FnMut() -> Result<()>>(mut f: F, reps: usize, steps: Option<usize>) -> Result<TimingStats> {
    if reps < 3 {
        return Err(Error::invalid("timing needs at least three repetitions"));
    }
    f()?;
    let mut per_call = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        per_call.push(t.elapsed().as_secs_f64());
    }
    let mean = per_call.iter().sum::<f64>() / reps as f64;
    let std = (per_call.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    Ok(TimingStats {
        mean,
        std,
        per_call,
        steps,
        device: device_description(),
    })
}
/// Separable Gaussian blur with edge clamping, truncated at 3σ.
pub fn gaussian_blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Result<Vec<f32>> {
    same_len(h * w, img.len())?;
    if !(sigma > 0.0) {
        return Ok(img.to_vec());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let tap = |len: usize, c: usize, i: isize| (c as isize + i).clamp(0, len as isize - 1) as usize;
    let mut rows = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r).map(|i| k[(i + r) as usize] * img[y * w + tap(w, x, i)] as f64).sum::<f64>() / norm;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = ((-r..=r).map(|i| k[(i + r) as usize] * rows[tap(h, y, i) * w + x]).sum::<f64>() / norm) as f32;
        }
    }
    Ok(out)
}
