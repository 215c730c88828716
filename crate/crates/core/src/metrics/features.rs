use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vae::Vae;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Where a feature space comes from; carried into every report so feature
/// distances are never mistaken for ones computed with other networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    VaeEncoder,
    TrainedProbe,
    External,
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::VaeEncoder => "vae-encoder",
            Self::TrainedProbe => "trained-probe",
            Self::External => "external",
        })
    }
}

/// Deterministic map from an `h × w` image to a fixed-length vector.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &[f32], h: usize, w: usize) -> Result<Vec<f64>>;

    fn provenance(&self) -> Provenance;

    /// Short identifier for reports.
    fn name(&self) -> String;

    fn features_batch(&self, images: &[&[f32]], h: usize, w: usize) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.features(im, h, w)).collect()
    }
}

/// Average-pools a `[C, h, w]` map onto a `g × g` grid per channel.
fn pool_grid(data: &[f64], c: usize, h: usize, w: usize, g: usize) -> Vec<f64> {
    let (gy, gx) = (g.min(h), g.min(w));
    let mut out = Vec::with_capacity(c * gy * gx);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for cy in 0..gy {
            let (y0, y1) = (cy * h / gy, (cy + 1) * h / gy);
            for cx in 0..gx {
                let (x0, x1) = (cx * w / gx, (cx + 1) * w / gx);
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += plane[y * w + x];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

/// Posterior means of a frozen autoencoder, pooled onto a coarse grid.
#[derive(Clone)]
pub struct VaeFeatures {
    pub vae: Arc<Vae>,
    /// Pooling grid side; 0 keeps the full latent resolution.
    pub grid: usize,
}

impl VaeFeatures {
    pub fn new(vae: Arc<Vae>, grid: usize) -> Self {
        Self { vae, grid }
    }

    fn pool(&self, mu: &Tensor<f32>) -> Vec<Vec<f64>> {
        let s = mu.shape();
        let (c, h, w) = (s[1], s[3], s[4]);
        let per = c * s[2] * h * w;
        (0..s[0])
            .map(|i| {
                let item: Vec<f64> = mu.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
                if self.grid == 0 {
                    item
                } else {
                    pool_grid(&item, c * s[2], h, w, self.grid)
                }
            })
            .collect()
    }
}

impl FeatureExtractor for VaeFeatures {
    fn features(&self, image: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
        Ok(self.features_batch(&[image], h, w)?.remove(0))
    }

    fn features_batch(&self, images: &[&[f32]], h: usize, w: usize) -> Result<Vec<Vec<f64>>> {
        if images.iter().any(|im| im.len() != h * w) {
            return Err(Error::invalid("image size does not match the declared grid"));
        }
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            let batch = crate::volume::batch_tensor(chunk, [1, h, w]);
            out.extend(self.pool(&self.vae.encode(&batch)?.mu));
        }
        Ok(out)
    }

    fn provenance(&self) -> Provenance {
        Provenance::VaeEncoder
    }

    fn name(&self) -> String {
        format!("vae-mu-pool{}", self.grid)
    }
}

/// Training-free multi-scale descriptor: on each level of a 2× average
/// pyramid (finest level skipped), the pooled intensity and the pooled
/// gradient magnitude on a fixed grid.
#[derive(Clone, Debug)]
pub struct GradientPyramid {
    pub levels: usize,
    pub grid: usize,
}

impl Default for GradientPyramid {
    fn default() -> Self {
        Self { levels: 3, grid: 8 }
    }
}

fn half(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let p = 2 * y * w + 2 * x;
            out.push(0.25 * (img[p] + img[p + 1] + img[p + w] + img[p + w + 1]));
        }
    }
    (out, oh, ow)
}

impl FeatureExtractor for GradientPyramid {
    fn features(&self, image: &[f32], h: usize, w: usize) -> Result<Vec<f64>> {
        if image.len() != h * w {
            return Err(Error::invalid("image size does not match the declared grid"));
        }
        if h >> self.levels < 2 || w >> self.levels < 2 {
            return Err(Error::invalid(format!("image {h}x{w} too small for {} pyramid levels", self.levels)));
        }
        let mut img: Vec<f64> = image.iter().map(|&v| v as f64).collect();
        let (mut ch, mut cw) = (h, w);
        let mut out = Vec::new();
        for _ in 0..self.levels {
            (img, ch, cw) = half(&img, ch, cw);
            let mut grad = vec![0.0; ch * cw];
            for y in 0..ch {
                for x in 0..cw {
                    let gx = if x + 1 < cw { img[y * cw + x + 1] - img[y * cw + x] } else { 0.0 };
                    let gy = if y + 1 < ch { img[(y + 1) * cw + x] - img[y * cw + x] } else { 0.0 };
                    grad[y * cw + x] = (gx * gx + gy * gy).sqrt();
                }
            }
            out.extend(pool_grid(&img, 1, ch, cw, self.grid));
            out.extend(pool_grid(&grad, 1, ch, cw, self.grid));
        }
        Ok(out)
    }

    fn provenance(&self) -> Provenance {
        Provenance::External
    }

    fn name(&self) -> String {
        format!("gradient-pyramid-l{}g{}", self.levels, self.grid)
    }
}
