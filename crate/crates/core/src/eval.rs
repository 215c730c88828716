//! Hidden-slice evaluation: every interior slice of each held-out subject is
//! predicted from its two neighbours and scored against the truth, for the
//! generative modes and the classical baselines.

use crate::error::{Error, Result};
use crate::interpolator::{generate_batch, slerp, step_seed, CalidModel, InferenceConfig, Mode, Request};
use crate::metrics::{
    asd, assd, dice, hausdorff, perceptual_distance, psnr, rfid, ssim_frames, temporal_consistency, FeatureExtractor, MaskGrid,
    MetricReport,
};
use crate::nn::Dims;
use crate::phantom::{segment_cavity, CAVITY_THRESHOLD};
use crate::tensor::Tensor;
use crate::vae::Vae;
use crate::volume::{batch_tensor, MaskSet, Volume};
use serde::{Deserialize, Serialize};

/// Ways of predicting a hidden slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BilinearPixel,
    LatentLerp,
    LatentSlerp,
    Calid,
    CalidPlus,
}

impl Method {
    pub const ALL: [Method; 5] = [Self::BilinearPixel, Self::LatentLerp, Self::LatentSlerp, Self::Calid, Self::CalidPlus];

    pub fn name(self) -> &'static str {
        match self {
            Self::BilinearPixel => "bilinear_pixel",
            Self::LatentLerp => "latent_lerp",
            Self::LatentSlerp => "latent_slerp",
            Self::Calid => "calid",
            Self::CalidPlus => "calid_plus",
        }
    }

    pub fn needs_model(self) -> bool {
        self != Self::BilinearPixel
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Pixel-space average of the two neighbours.
pub fn bilinear_pixel(prev: &[f32], next: &[f32]) -> Vec<f32> {
    prev.iter().zip(next).map(|(&a, &b)| 0.5 * (a + b)).collect()
}

/// Decodes the (spherical or linear) midpoint of the neighbours' posterior
/// means. Inputs are `[B, C, D, H, W]`.
pub fn latent_midpoint(vae: &Vae, prev: &Tensor<f32>, next: &Tensor<f32>, spherical: bool) -> Result<Tensor<f32>> {
    let a = vae.latents(prev)?;
    let b = vae.latents(next)?;
    let mids = (0..a.batch())
        .map(|i| {
            if spherical {
                slerp(&a.item(i), &b.item(i), 0.5)
            } else {
                Ok(a.item(i).zip_map(&b.item(i), |x, y| 0.5 * (x + y)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vae.decode_latents(&Tensor::stack_batch(&mids))?.map(|v| v.clamp(0.0, 1.0)))
}

/// A hidden slice with everything needed to predict and score it. Image
/// blocks are `[D, H, W]`; `D` is 1 for planar cases.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub subject: String,
    pub slice: usize,
    /// Frames covered by the blocks.
    pub frames: Vec<usize>,
    pub shape: [usize; 3],
    pub prev: Vec<f32>,
    pub target: Vec<f32>,
    pub next: Vec<f32>,
    /// Neighbours of `prev` and `next` at the source spacing, used for
    /// inversion; boundary sources use themselves.
    pub prev_context: (Vec<f32>, Vec<f32>),
    pub next_context: (Vec<f32>, Vec<f32>),
    /// Analytic cavity mask of the target, `[D, H, W]`.
    pub lvc: Vec<bool>,
    pub in_plane_mm: f64,
}

impl EvalCase {
    pub fn id(&self) -> String {
        let f: Vec<String> = self.frames.iter().map(|f| f.to_string()).collect();
        format!("{}/z{}/t{}", self.subject, self.slice, f.join("-"))
    }
}

/// Builds hidden-slice cases for every interior slice. Planar cases use the
/// listed frames one at a time; temporal cases use them as one block.
pub fn collect_cases(volumes: &[(Volume, MaskSet)], frames: &[usize], temporal: bool) -> Result<Vec<EvalCase>> {
    let mut cases = Vec::new();
    for (v, m) in volumes {
        let g = v.grid;
        if g.slices < 3 {
            return Err(Error::invalid(format!("subject {} has fewer than 3 slices", v.subject_id)));
        }
        if let Some(&bad) = frames.iter().find(|&&f| f >= g.frame_count()) {
            return Err(Error::invalid(format!("frame {bad} outside subject {}", v.subject_id)));
        }
        let groups: Vec<Vec<usize>> = if temporal { vec![frames.to_vec()] } else { frames.iter().map(|&f| vec![f]).collect() };
        for fr in &groups {
            let take = |z: isize| -> Option<Vec<f32>> {
                (0..g.slices as isize).contains(&z).then(|| fr.iter().flat_map(|&t| v.image(z as usize, t).to_vec()).collect())
            };
            for n in 1..g.slices - 1 {
                let z = n as isize;
                let (prev, next) = (take(z - 1).unwrap(), take(z + 1).unwrap());
                let lvc = fr.iter().flat_map(|&t| m.lvc_image(n, t).to_vec()).collect();
                cases.push(EvalCase {
                    subject: v.subject_id.clone(),
                    slice: n,
                    frames: fr.clone(),
                    shape: [fr.len(), g.height, g.width],
                    prev_context: (take(z - 3).unwrap_or_else(|| prev.clone()), take(z + 1).unwrap()),
                    next_context: (take(z - 1).unwrap(), take(z + 3).unwrap_or_else(|| next.clone())),
                    target: take(z).unwrap(),
                    prev,
                    next,
                    lvc,
                    in_plane_mm: v.spacing.in_plane,
                });
            }
        }
    }
    Ok(cases)
}

/// Evaluation options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    pub inference: InferenceConfig,
    /// Frames scored per subject.
    pub frames: Vec<usize>,
    /// Score temporal blocks instead of single frames (volumetric models).
    pub temporal: bool,
    pub lvc_threshold: f32,
    /// Also generate with the neighbours swapped and report the PSNR
    /// between both outputs.
    pub swap_test: bool,
    /// Step counts for the sampling sweep (empty disables it).
    pub sweep_steps: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            inference: InferenceConfig::default(),
            frames: vec![0],
            temporal: false,
            lvc_threshold: CAVITY_THRESHOLD,
            swap_test: false,
            sweep_steps: Vec::new(),
        }
    }
}

fn tensors(cases: &[&EvalCase], pick: impl Fn(&EvalCase) -> &[f32]) -> Tensor<f32> {
    let refs: Vec<&[f32]> = cases.iter().map(|c| pick(c)).collect();
    batch_tensor(&refs, cases[0].shape)
}

fn split(out: &Tensor<f32>) -> Vec<Vec<f32>> {
    (0..out.batch()).map(|i| out.item(i).into_data()).collect()
}

fn requests(cases: &[&EvalCase], seed: u64, swapped: bool) -> Vec<Request> {
    cases
        .iter()
        .map(|c| {
            let t = |d: &[f32]| batch_tensor(&[d], c.shape);
            let (a, b, ac, bc) = if swapped {
                (&c.next, &c.prev, &c.next_context, &c.prev_context)
            } else {
                (&c.prev, &c.next, &c.prev_context, &c.next_context)
            };
            Request {
                prev: t(a),
                next: t(b),
                prev_context: (t(&ac.0), t(&ac.1)),
                next_context: (t(&bc.0), t(&bc.1)),
                seed: case_seed(seed, c),
            }
        })
        .collect()
}

/// Sampling seed of a case; independent of the case order.
pub fn case_seed(run_seed: u64, case: &EvalCase) -> u64 {
    let subject = case.subject.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    step_seed(run_seed ^ subject, case.slice as f64, case.frames[0])
}

/// Predictions of one method for `cases`, in order.
pub fn predict(method: Method, cases: &[EvalCase], model: Option<&CalidModel>, inference: &InferenceConfig) -> Result<Vec<Vec<f32>>> {
    if method == Method::BilinearPixel {
        return Ok(cases.iter().map(|c| bilinear_pixel(&c.prev, &c.next)).collect());
    }
    let model = model.ok_or_else(|| Error::invalid(format!("method {} needs a trained model", method.name())))?;
    let mut out = Vec::with_capacity(cases.len());
    let refs: Vec<&EvalCase> = cases.iter().collect();
    for chunk in refs.chunks(inference.batch_size.max(1)) {
        let pred = match method {
            Method::LatentLerp | Method::LatentSlerp => latent_midpoint(
                &model.vae,
                &tensors(chunk, |c| &c.prev),
                &tensors(chunk, |c| &c.next),
                method == Method::LatentSlerp,
            )?,
            Method::Calid | Method::CalidPlus => {
                let cfg = InferenceConfig {
                    mode: if method == Method::Calid { Mode::Calid } else { Mode::CalidPlus },
                    ..inference.clone()
                };
                generate_batch(model, &requests(chunk, inference.seed, false), &cfg)?
            }
            Method::BilinearPixel => unreachable!(),
        };
        out.extend(split(&pred));
    }
    Ok(out)
}

fn swapped_predictions(method: Method, cases: &[EvalCase], model: &CalidModel, inference: &InferenceConfig) -> Result<Vec<Vec<f32>>> {
    let cfg = InferenceConfig {
        mode: if method == Method::Calid { Mode::Calid } else { Mode::CalidPlus },
        ..inference.clone()
    };
    let refs: Vec<&EvalCase> = cases.iter().collect();
    let mut out = Vec::new();
    for chunk in refs.chunks(inference.batch_size.max(1)) {
        out.extend(split(&generate_batch(model, &requests(chunk, inference.seed, true), &cfg)?));
    }
    Ok(out)
}

/// Per-case scores of one prediction.
pub fn score_case(case: &EvalCase, pred: &[f32], threshold: f32, extractor: &dyn FeatureExtractor) -> Result<Vec<(&'static str, f64)>> {
    let [d, h, w] = case.shape;
    let plane = h * w;
    let mut out = vec![
        ("psnr", psnr(pred, &case.target, 1.0)?),
        ("ssim", ssim_frames(pred, &case.target, d, h, w)?),
    ];
    let mut perc = 0.0;
    let (mut di, mut hd, mut ad, mut asd_sym) = (0.0, 0.0, 0.0, 0.0);
    let grid = MaskGrid::planar(h, w, case.in_plane_mm);
    for f in 0..d {
        let (p, t) = (&pred[f * plane..(f + 1) * plane], &case.target[f * plane..(f + 1) * plane]);
        perc += perceptual_distance(p, t, h, w, extractor)?;
        let truth = &case.lvc[f * plane..(f + 1) * plane];
        let seg = segment_cavity(p, h, w, mask_centroid(truth, w).unwrap_or([h as f64 / 2.0, w as f64 / 2.0]), threshold);
        di += dice(&seg, truth)?;
        hd += hausdorff(&seg, truth, &grid)?;
        ad += asd(&seg, truth, &grid)?;
        asd_sym += assd(&seg, truth, &grid)?;
    }
    let n = d as f64;
    out.extend([
        ("perceptual", perc / n),
        ("lvc_dice", di / n),
        ("lvc_hd", hd / n),
        ("lvc_asd", ad / n),
        ("lvc_assd", asd_sym / n),
    ]);
    if d > 1 {
        out.push(("temporal_consistency", temporal_consistency(pred, d, h, w)?));
    }
    Ok(out)
}

fn mask_centroid(mask: &[bool], w: usize) -> Option<[f64; 2]> {
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sy += (i / w) as f64 + 0.5;
        sx += (i % w) as f64 + 0.5;
        n += 1;
    }
    (n > 0).then(|| [sy / n as f64, sx / n as f64])
}

/// Distribution-level distance between predicted and true frames.
fn set_rfid(cases: &[EvalCase], preds: &[Vec<f32>], extractor: &dyn FeatureExtractor) -> Result<f64> {
    let [_, h, w] = cases[0].shape;
    let plane = h * w;
    let frames = |data: &[f32]| data.chunks(plane).map(<[f32]>::to_vec).collect::<Vec<_>>();
    let truth: Vec<Vec<f32>> = cases.iter().flat_map(|c| frames(&c.target)).collect();
    let gen: Vec<Vec<f32>> = preds.iter().flat_map(|p| frames(p)).collect();
    let feats = |imgs: &[Vec<f32>]| -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&[f32]> = imgs.iter().map(Vec::as_slice).collect();
        extractor.features_batch(&refs, h, w)
    };
    rfid(&feats(&truth)?, &feats(&gen)?)
}

/// Scores every configured method on `cases`. Set-level rFID rows use the
/// case name `all`.
pub fn evaluate(cases: &[EvalCase], model: Option<&CalidModel>, config: &EvalConfig, extractor: &dyn FeatureExtractor) -> Result<MetricReport> {
    if cases.is_empty() {
        return Err(Error::invalid("no evaluation cases (empty test split?)"));
    }
    if let Some(m) = model {
        let temporal = m.dims() == Dims::Volumetric;
        if temporal != config.temporal {
            return Err(Error::invalid("temporal evaluation requires a volumetric model and vice versa"));
        }
    }
    let mut report = MetricReport::default();
    report.meta.mode = config.inference.mode.to_string();
    report.meta.steps = config.inference.ddim_steps;
    report.meta.seed = config.inference.seed;
    report.meta.feature_space = Some(format!("{} ({})", extractor.name(), extractor.provenance()));
    let start = std::time::Instant::now();
    for &method in &config.methods {
        if method.needs_model() && model.is_none() {
            log::warn!("skipping {}: no model checkpoint", method.name());
            continue;
        }
        let preds = predict(method, cases, model, &config.inference)?;
        let scores = crate::parallel::map_indices(cases.len(), |i| score_case(&cases[i], &preds[i], config.lvc_threshold, extractor));
        for (c, s) in cases.iter().zip(scores) {
            for (metric, v) in s? {
                report.push(c.id(), method.name(), metric, v);
            }
        }
        if cases.len() * cases[0].shape[0] >= 2 {
            report.push("all", method.name(), "rfid", set_rfid(cases, &preds, extractor)?);
        }
        if let (true, Some(m), Method::Calid | Method::CalidPlus) = (config.swap_test, model, method) {
            let swapped = swapped_predictions(method, cases, m, &config.inference)?;
            for ((c, a), b) in cases.iter().zip(&preds).zip(&swapped) {
                report.push(c.id(), method.name(), "swap_psnr", psnr(a, b, 1.0)?);
            }
        }
    }
    report.meta.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// CaLID scores over a list of DDIM step counts; methods are named
/// `calid_s{k}`.
pub fn steps_sweep(cases: &[EvalCase], model: &CalidModel, config: &EvalConfig, mode: Mode, extractor: &dyn FeatureExtractor) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    report.meta.mode = mode.to_string();
    report.meta.seed = config.inference.seed;
    report.meta.feature_space = Some(format!("{} ({})", extractor.name(), extractor.provenance()));
    let method = if mode == Mode::Calid { Method::Calid } else { Method::CalidPlus };
    for &k in &config.sweep_steps {
        let inf = InferenceConfig {
            ddim_steps: k,
            invert_steps: config.inference.invert_steps.map(|_| k),
            ..config.inference.clone()
        };
        let preds = predict(method, cases, Some(model), &inf)?;
        let name = format!("{}_s{k}", method.name());
        for (c, p) in cases.iter().zip(&preds) {
            let [d, h, w] = c.shape;
            report.push(c.id(), &name, "psnr", psnr(p, &c.target, 1.0)?);
            report.push(c.id(), &name, "ssim", ssim_frames(p, &c.target, d, h, w)?);
            report.push(c.id(), &name, "perceptual", {
                let plane = h * w;
                let mut s = 0.0;
                for f in 0..d {
                    s += perceptual_distance(&p[f * plane..(f + 1) * plane], &c.target[f * plane..(f + 1) * plane], h, w, extractor)?;
                }
                s / d as f64
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GradientPyramid;
    use crate::phantom::random_phantom;

    #[test]
    fn bilinear_evaluation_without_model() {
        let data: Vec<_> = (0..2)
            .map(|i| {
                let (_, v, m) = random_phantom(32, 5, 2, 0.0, i).unwrap();
                (v, m)
            })
            .collect();
        let cases = collect_cases(&data, &[0, 1], false).unwrap();
        assert_eq!(cases.len(), 2 * 3 * 2);
        assert_eq!(cases[0].prev_context.0, cases[0].prev);
        let extractor = GradientPyramid { levels: 2, grid: 4 };
        let report = evaluate(&cases, None, &EvalConfig::default(), &extractor).unwrap();
        let agg = report.aggregate();
        assert!(agg.iter().all(|a| a.method == "bilinear_pixel"));
        let psnr = report.mean_of("bilinear_pixel", "psnr").unwrap();
        assert!(psnr > 15.0 && psnr < 100.0, "{psnr}");
        let dice = report.mean_of("bilinear_pixel", "lvc_dice").unwrap();
        assert!((0.0..=1.0).contains(&dice));
    }
}
