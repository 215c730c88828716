//! Short-axis stacks, analytic masks and the preprocessing applied before
//! training and evaluation.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Physical sampling of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    /// In-plane pixel size in mm.
    pub in_plane: f64,
    /// Distance between neighbouring slices in mm.
    pub slice: f64,
    /// Temporal sampling (frame index units).
    pub frame: f64,
}

impl Default for Spacing {
    fn default() -> Self {
        Self {
            in_plane: 1.8,
            slice: 8.0,
            frame: 1.0,
        }
    }
}

impl Spacing {
    fn validate(&self) -> Result<()> {
        if [self.in_plane, self.slice, self.frame].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::invalid(format!("spacing values must be positive: {self:?}")))
        }
    }
}

/// Grid of a stack, laid out `[slices, frames, height, width]` row-major.
/// `frames = None` marks a static stack without a temporal axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub slices: usize,
    pub frames: Option<usize>,
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn frame_count(&self) -> usize {
        self.frames.unwrap_or(1)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.slices * self.frame_count() * self.plane()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Array shape, omitting the temporal axis of static stacks.
    pub fn shape(&self) -> Vec<usize> {
        match self.frames {
            Some(t) => vec![self.slices, t, self.height, self.width],
            None => vec![self.slices, self.height, self.width],
        }
    }

    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        match *shape {
            [z, h, w] => Ok(Self {
                slices: z,
                frames: None,
                height: h,
                width: w,
            }),
            [z, t, h, w] => Ok(Self {
                slices: z,
                frames: Some(t),
                height: h,
                width: w,
            }),
            _ => Err(Error::invalid(format!("expected a [Z, H, W] or [Z, T, H, W] array, got {shape:?}"))),
        }
    }

    /// Offset of the image at `(slice, frame)`.
    pub fn offset(&self, slice: usize, frame: usize) -> usize {
        (slice * self.frame_count() + frame) * self.plane()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Vec<f32>,
    pub grid: Grid,
    pub spacing: Spacing,
    pub subject_id: String,
}

impl Volume {
    pub fn new(voxels: Vec<f32>, grid: Grid, spacing: Spacing, subject_id: impl Into<String>) -> Result<Self> {
        if voxels.len() != grid.len() {
            return Err(Error::Shape {
                expected: grid.shape(),
                got: vec![voxels.len()],
            });
        }
        spacing.validate()?;
        Ok(Self {
            voxels,
            grid,
            spacing,
            subject_id: subject_id.into(),
        })
    }

    /// Checks every structural and intensity invariant.
    pub fn validate(&self) -> Result<()> {
        if self.grid.slices < 3 || self.grid.height < 16 || self.grid.width < 16 {
            return Err(Error::invalid(format!("volume too small: {:?}", self.grid)));
        }
        if self.grid.frames == Some(0) {
            return Err(Error::invalid("temporal axis has no frames"));
        }
        self.spacing.validate()?;
        if let Some(v) = self.voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("intensity {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn image(&self, slice: usize, frame: usize) -> &[f32] {
        let o = self.grid.offset(slice, frame);
        &self.voxels[o..o + self.grid.plane()]
    }

    /// All frames of one slice, `[T, H, W]`.
    pub fn block(&self, slice: usize) -> &[f32] {
        let o = self.grid.offset(slice, 0);
        &self.voxels[o..o + self.grid.frame_count() * self.grid.plane()]
    }

    /// Copy keeping only `frames` (in the given order).
    pub fn select_frames(&self, frames: &[usize]) -> Volume {
        let mut voxels = Vec::with_capacity(self.grid.slices * frames.len() * self.grid.plane());
        for z in 0..self.grid.slices {
            for &t in frames {
                voxels.extend_from_slice(self.image(z, t));
            }
        }
        let grid = Grid {
            frames: self.grid.frames.map(|_| frames.len()),
            ..self.grid
        };
        Volume {
            voxels,
            grid,
            spacing: self.spacing,
            subject_id: self.subject_id.clone(),
        }
    }

    /// Copy keeping only `slices`.
    pub fn select_slices(&self, slices: &[usize]) -> Volume {
        let mut voxels = Vec::with_capacity(slices.len() * self.grid.frame_count() * self.grid.plane());
        for &z in slices {
            voxels.extend_from_slice(self.block(z));
        }
        Volume {
            voxels,
            grid: Grid {
                slices: slices.len(),
                ..self.grid
            },
            spacing: self.spacing,
            subject_id: self.subject_id.clone(),
        }
    }
}

/// Segmentation of a stack into left-ventricular cavity (LVC), myocardium
/// (LVM) and right-ventricular cavity (RVC), on the grid of its volume.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub grid: Grid,
    pub lvc: Vec<bool>,
    pub lvm: Vec<bool>,
    pub rvc: Vec<bool>,
}

impl MaskSet {
    pub fn empty(grid: Grid) -> Self {
        Self {
            grid,
            lvc: vec![false; grid.len()],
            lvm: vec![false; grid.len()],
            rvc: vec![false; grid.len()],
        }
    }

    pub fn lvc_image(&self, slice: usize, frame: usize) -> &[bool] {
        let o = self.grid.offset(slice, frame);
        &self.lvc[o..o + self.grid.plane()]
    }
}

/// Crops the two trailing axes of an array to `size × size` around the
/// centre (offsets round toward the origin).
pub fn center_crop<T: Copy>(data: &[T], shape: &[usize], size: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if shape.len() < 2 || shape.iter().product::<usize>() != data.len() {
        return Err(Error::invalid(format!("cannot crop array of shape {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if size > h.min(w) || size == 0 {
        return Err(Error::invalid(format!("crop size {size} exceeds image {h}x{w}")));
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let mut out = Vec::with_capacity(lead * size * size);
    for l in 0..lead {
        let base = l * h * w;
        for y in oy..oy + size {
            let row = base + y * w;
            out.extend_from_slice(&data[row + ox..row + ox + size]);
        }
    }
    let mut s = shape.to_vec();
    let n = s.len();
    s[n - 2] = size;
    s[n - 1] = size;
    Ok((out, s))
}

/// Min-max rescale to `[0, 1]`; a constant volume maps to zeros.
pub fn normalize_intensity(volume: &Volume) -> Result<Volume> {
    if volume.voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("volume {} contains non-finite voxels", volume.subject_id)));
    }
    let (lo, hi) = volume
        .voxels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut out = volume.clone();
    if hi > lo {
        let (lo, range) = (lo as f64, (hi - lo) as f64);
        for v in &mut out.voxels {
            *v = ((*v as f64 - lo) / range) as f32;
        }
    } else {
        out.voxels.iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(out)
}

/// `count` frame indices spread uniformly over `0..total`, rounded to the
/// nearest index.
pub fn uniform_frames(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::invalid(format!("cannot select {count} of {total} frames")));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    Ok((0..count)
        .map(|i| (i as f64 * (total - 1) as f64 / (count - 1) as f64).round() as usize)
        .collect())
}

/// How training items are drawn from a stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ItemOptions {
    /// Return whole `[T, H, W]` slice blocks instead of single frames.
    pub temporal: bool,
    /// Uniformly subsample this many frames for temporal items.
    pub subsample_frames: Option<usize>,
    /// Pool of frames for single-frame items: every `frame_stride`-th frame.
    pub frame_stride: usize,
    /// Random horizontal and vertical flips.
    pub flip: bool,
}

impl Default for ItemOptions {
    fn default() -> Self {
        Self {
            temporal: false,
            subsample_frames: None,
            frame_stride: 1,
            flip: true,
        }
    }
}

/// A target slice with its two direct neighbours, each `[D, H, W]` with
/// `D = 1` for single frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingItem {
    pub prev: Vec<f32>,
    pub target: Vec<f32>,
    pub next: Vec<f32>,
    /// `[D, H, W]`.
    pub shape: [usize; 3],
    pub index: usize,
    pub frames: Vec<usize>,
    pub flip_h: bool,
    pub flip_v: bool,
}

/// Flips each `[H, W]` image of a `[D, H, W]` block in place.
pub fn flip_block(data: &mut [f32], shape: [usize; 3], horizontal: bool, vertical: bool) {
    let [_, h, w] = shape;
    for img in data.chunks_mut(h * w) {
        if horizontal {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
        if vertical {
            for y in 0..h / 2 {
                let (top, bottom) = img.split_at_mut((h - 1 - y) * w);
                top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
            }
        }
    }
}

/// Frames `frames` of slice `z` as a `[D, H, W]` block, optionally flipped.
pub fn extract_block(volume: &Volume, z: usize, frames: &[usize], flip_h: bool, flip_v: bool) -> Vec<f32> {
    let g = volume.grid;
    let mut out = Vec::with_capacity(frames.len() * g.plane());
    for &t in frames {
        out.extend_from_slice(volume.image(z, t));
    }
    flip_block(&mut out, [frames.len(), g.height, g.width], flip_h, flip_v);
    out
}

/// Stacks `[D, H, W]` blocks into a `[B, 1, D, H, W]` batch tensor.
pub fn batch_tensor(blocks: &[&[f32]], shape: [usize; 3]) -> crate::tensor::Tensor<f32> {
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(blocks.len() * per);
    for b in blocks {
        assert_eq!(b.len(), per, "block does not match shape {shape:?}");
        data.extend_from_slice(b);
    }
    crate::tensor::Tensor::from_vec(&[blocks.len(), 1, shape[0], shape[1], shape[2]], data)
}

pub fn sample_training_item<R: Rng>(volume: &Volume, opts: &ItemOptions, rng: &mut R) -> Result<TrainingItem> {
    let g = volume.grid;
    if g.slices < 3 {
        return Err(Error::invalid(format!("need at least 3 slices, volume has {}", g.slices)));
    }
    let n = rng.random_range(1..=g.slices - 2);
    let frames = if opts.temporal {
        match opts.subsample_frames {
            Some(k) => uniform_frames(g.frame_count(), k)?,
            None => (0..g.frame_count()).collect(),
        }
    } else {
        let stride = opts.frame_stride.max(1);
        let pool = g.frame_count().div_ceil(stride);
        vec![rng.random_range(0..pool) * stride]
    };
    let (flip_h, flip_v) = if opts.flip {
        (rng.random_bool(0.5), rng.random_bool(0.5))
    } else {
        (false, false)
    };
    let shape = [frames.len(), g.height, g.width];
    let take = |z: usize| extract_block(volume, z, &frames, flip_h, flip_v);
    Ok(TrainingItem {
        prev: take(n - 1),
        target: take(n),
        next: take(n + 1),
        shape,
        index: n,
        frames,
        flip_h,
        flip_v,
    })
}

/// A planar section through a stack in voxel-index coordinates
/// `(slice, row, column)`. Output pixel `(r, c)` samples
/// `origin + r * down + c * right`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub origin: [f64; 3],
    pub right: [f64; 3],
    pub down: [f64; 3],
}

impl Plane {
    /// The plane of slice `k`, pixel for pixel.
    pub fn slice(k: f64) -> Self {
        Self {
            origin: [k, 0.0, 0.0],
            right: [0.0, 0.0, 1.0],
            down: [0.0, 1.0, 0.0],
        }
    }
}

/// Trilinear resampling of one frame of `volume` onto `plane`; samples
/// outside the stack are zero.
pub fn reslice_plane(volume: &Volume, plane: &Plane, out_size: (usize, usize), frame: usize) -> Result<Vec<f32>> {
    let (u, v) = (plane.right, plane.down);
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let norm = |a: [f64; 3]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm(cross) <= 1e-12 * norm(u) * norm(v) || norm(u) == 0.0 || norm(v) == 0.0 {
        return Err(Error::invalid("plane axes are degenerate or parallel"));
    }
    let g = volume.grid;
    if frame >= g.frame_count() {
        return Err(Error::invalid(format!("frame {frame} out of range")));
    }
    let bounds = [g.slices, g.height, g.width];
    let at = |z: usize, y: usize, x: usize| volume.image(z, frame)[y * g.width + x] as f64;
    let mut out = Vec::with_capacity(out_size.0 * out_size.1);
    for r in 0..out_size.0 {
        for c in 0..out_size.1 {
            let p: [f64; 3] = std::array::from_fn(|i| plane.origin[i] + r as f64 * v[i] + c as f64 * u[i]);
            let inside = (0..3).all(|i| p[i] >= -1e-9 && p[i] <= (bounds[i] - 1) as f64 + 1e-9);
            if !inside {
                out.push(0.0);
                continue;
            }
            let mut lo = [0usize; 3];
            let mut fr = [0f64; 3];
            for i in 0..3 {
                let q = p[i].clamp(0.0, (bounds[i] - 1) as f64);
                lo[i] = (q.floor() as usize).min(bounds[i].saturating_sub(2));
                fr[i] = q - lo[i] as f64;
                if bounds[i] == 1 {
                    lo[i] = 0;
                    fr[i] = 0.0;
                }
            }
            let mut acc = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut idx = [0usize; 3];
                for i in 0..3 {
                    let hi = (corner >> (2 - i)) & 1 == 1;
                    w *= if hi { fr[i] } else { 1.0 - fr[i] };
                    idx[i] = lo[i] + hi as usize;
                }
                if w != 0.0 {
                    acc += w * at(idx[0], idx[1], idx[2]);
                }
            }
            out.push(acc as f32);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(z: usize, h: usize, w: usize) -> Volume {
        let grid = Grid {
            slices: z,
            frames: None,
            height: h,
            width: w,
        };
        let mut vox = Vec::new();
        for k in 0..z {
            for y in 0..h {
                for x in 0..w {
                    vox.push(((k * 7 + y * 3 + x) % 97) as f32 / 96.0);
                }
            }
        }
        Volume::new(vox, grid, Spacing::default(), "ramp").unwrap()
    }

    #[test]
    fn crop_offsets() {
        let data: Vec<u32> = (0..130 * 130).collect();
        let (out, shape) = center_crop(&data, &[130, 130], 128).unwrap();
        assert_eq!(shape, vec![128, 128]);
        assert_eq!(out[0], 130 + 1);
        let same: Vec<u8> = vec![3; 128 * 128];
        assert_eq!(center_crop(&same, &[128, 128], 128).unwrap().0, same);
        let (o3, s3) = center_crop(&vec![1.0f32; 2 * 20 * 18], &[2, 20, 18], 16).unwrap();
        assert_eq!((s3, o3.len()), (vec![2, 16, 16], 2 * 256));
        assert!(center_crop(&same, &[128, 128], 129).is_err());
    }

    #[test]
    fn normalisation_cases() {
        let mut v = ramp(3, 16, 16);
        v.voxels.iter_mut().for_each(|x| *x = 10.0 + 10.0 * *x);
        let n = normalize_intensity(&v).unwrap();
        let (lo, hi) = n.voxels.iter().fold((1f32, 0f32), |(l, h), &x| (l.min(x), h.max(x)));
        assert_eq!((lo, hi), (0.0, 1.0));
        v.voxels.iter_mut().for_each(|x| *x = 4.0);
        assert!(normalize_intensity(&v).unwrap().voxels.iter().all(|&x| x == 0.0));
        v.voxels[3] = f32::NAN;
        assert!(normalize_intensity(&v).is_err());
    }

    #[test]
    fn uniform_frame_selection() {
        let f = uniform_frames(50, 32).unwrap();
        let want: Vec<usize> = (0..32).map(|i| (i as f64 * 49.0 / 31.0).round() as usize).collect();
        assert_eq!(f, want);
        assert!(f.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(uniform_frames(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn three_slices_force_middle_target() {
        let v = ramp(3, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let it = sample_training_item(&v, &ItemOptions::default(), &mut rng).unwrap();
            assert_eq!(it.index, 1);
            let mut t = it.target.clone();
            flip_block(&mut t, it.shape, it.flip_h, it.flip_v);
            assert_eq!(t, v.image(1, 0));
        }
        assert!(sample_training_item(&ramp(2, 16, 16), &ItemOptions::default(), &mut rng).is_err());
    }

    #[test]
    fn reslice_identity_and_midplane() {
        let v = ramp(4, 16, 16);
        let img = reslice_plane(&v, &Plane::slice(2.0), (16, 16), 0).unwrap();
        for (a, b) in img.iter().zip(v.image(2, 0)) {
            assert!((a - b).abs() < 1e-6);
        }
        let outside = Plane {
            origin: [10.0, 0.0, 0.0],
            ..Plane::slice(0.0)
        };
        assert!(reslice_plane(&v, &outside, (8, 8), 0).unwrap().iter().all(|&x| x == 0.0));
        let bad = Plane {
            down: [0.0, 0.0, 2.0],
            ..Plane::slice(0.0)
        };
        assert!(reslice_plane(&v, &bad, (8, 8), 0).is_err());
    }
}
