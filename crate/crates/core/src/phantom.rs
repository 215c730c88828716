//! Synthetic cardiac-like short-axis phantoms with analytic masks.
//!
//! Each subject is a soft-edged body ellipse containing a left ventricle
//! (bright cavity inside a darker myocardial ring) and a crescent-shaped right
//! ventricle. Centres drift along the stack and radii follow low-order
//! polynomials of the slice position; an optional cardiac cycle contracts the
//! ventricles between end-diastole (frame 0) and end-systole (frame T/2).

use crate::error::{Error, Result};
use crate::volume::{Grid, MaskSet, Spacing, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const BODY_INTENSITY: f64 = 0.15;
pub const MYOCARDIUM_INTENSITY: f64 = 0.3;
pub const RV_INTENSITY: f64 = 0.6;
pub const CAVITY_INTENSITY: f64 = 0.9;

/// Threshold separating the LV cavity from every other tissue class.
pub const CAVITY_THRESHOLD: f32 = 0.75;

/// Per-subject shape coefficients. Lengths are in pixels of a 64-pixel
/// image and scale with `image_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MorphParams {
    /// LV centre at the middle slice.
    pub center: [f64; 2],
    /// Centre displacement per slice.
    pub drift: [f64; 2],
    /// Quadratic bend of the centre path, per slice squared.
    pub bend: [f64; 2],
    /// Endocardial semi-major axis at the base.
    pub radius: f64,
    /// Relative shrinkage of the LV from base to apex.
    pub taper: f64,
    /// Minor / major axis ratio.
    pub ellipticity: f64,
    pub orientation: f64,
    /// Myocardial wall thickness at the base and its change toward the apex.
    pub wall: [f64; 2],
    /// Direction of the RV as seen from the LV centre.
    pub rv_angle: f64,
    /// RV size relative to the LV cavity.
    pub rv_scale: f64,
    /// Fractional endocardial shrinkage at end-systole.
    pub contraction: f64,
    /// Texture wave vectors `(ky, kx, kz)` and phases.
    pub texture: Vec<[f64; 4]>,
}

impl MorphParams {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let speed = rng.random_range(1.5..2.0);
        let dir = rng.random_range(0.0..2.0 * PI);
        let texture = (0..4)
            .map(|_| {
                let k = rng.random_range(0.25..0.6);
                let a = rng.random_range(0.0..2.0 * PI);
                [k * a.sin(), k * a.cos(), rng.random_range(-0.3..0.3), rng.random_range(0.0..2.0 * PI)]
            })
            .collect();
        Self {
            center: [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)],
            drift: [speed * dir.sin(), speed * dir.cos()],
            bend: [rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08)],
            radius: rng.random_range(8.5..11.5),
            taper: rng.random_range(0.35..0.55),
            ellipticity: rng.random_range(0.8..1.0),
            orientation: rng.random_range(0.0..PI),
            wall: [rng.random_range(3.0..4.5), rng.random_range(-1.0..0.0)],
            rv_angle: PI + rng.random_range(-0.5..0.5),
            rv_scale: rng.random_range(1.1..1.4),
            contraction: rng.random_range(0.2..0.35),
            texture,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub n_slices: usize,
    /// 1 for a static stack.
    pub n_frames: usize,
    pub noise_level: f64,
    pub morph: MorphParams,
}

impl PhantomSpec {
    /// Spec with shape coefficients drawn from `rng`.
    pub fn random<R: Rng>(image_size: usize, n_slices: usize, n_frames: usize, noise_level: f64, rng: &mut R) -> Self {
        Self {
            image_size,
            n_slices,
            n_frames,
            noise_level,
            morph: MorphParams::sample(rng),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::invalid(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.n_slices < 3 {
            return Err(Error::invalid(format!("n_slices must be >= 3, got {}", self.n_slices)));
        }
        if self.n_frames < 1 {
            return Err(Error::invalid("n_frames must be >= 1"));
        }
        if !(0.0..=0.2).contains(&self.noise_level) {
            return Err(Error::invalid(format!("noise_level must lie in [0, 0.2], got {}", self.noise_level)));
        }
        let m = &self.morph;
        if !(m.radius > 0.0 && m.ellipticity > 0.0 && m.wall[0] > 0.0 && (0.0..1.0).contains(&m.contraction)) {
            return Err(Error::invalid("morphology parameters out of range"));
        }
        Ok(())
    }
}

/// Rotated ellipse with a first-order signed-distance estimate.
#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(c: [f64; 2], a: f64, b: f64, angle: f64) -> Self {
        Self {
            cy: c[0],
            cx: c[1],
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Approximate signed distance in pixels (negative inside).
    fn distance(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        let (ua, vb) = (u / self.a, v / self.b);
        let rho = (ua * ua + vb * vb).sqrt();
        if rho < 1e-12 {
            return -self.a.min(self.b);
        }
        let gu = ua / (self.a * rho);
        let gv = vb / (self.b * rho);
        (rho - 1.0) / (gu * gu + gv * gv).sqrt()
    }
}

/// Fraction of a pixel covered by a shape at signed distance `d`.
fn coverage(d: f64) -> f64 {
    (0.5 - d / 1.5).clamp(0.0, 1.0)
}

/// Geometry of one (slice, frame).
#[derive(Clone, Copy, Debug)]
pub struct SliceGeometry {
    body: Ellipse,
    endo: Ellipse,
    epi: Ellipse,
    rv: Ellipse,
    /// LV centre in pixel coordinates `(row, col)`.
    pub lv_center: [f64; 2],
}

const MIN_WALL_PX: f64 = 1.5;

fn contraction_phase(frame: usize, n_frames: usize) -> f64 {
    if n_frames <= 1 {
        0.0
    } else {
        0.5 * (1.0 - (2.0 * PI * frame as f64 / n_frames as f64).cos())
    }
}

/// Geometry of `spec` at a (possibly fractional) slice position.
pub fn slice_geometry(spec: &PhantomSpec, slice: f64, frame: usize) -> SliceGeometry {
    let m = &spec.morph;
    let n = spec.image_size as f64;
    let unit = n / 64.0;
    let mid = (spec.n_slices - 1) as f64 / 2.0;
    let dz = slice - mid;
    let s = slice / (spec.n_slices - 1) as f64;
    let c = contraction_phase(frame, spec.n_frames) * m.contraction;
    let half = n / 2.0;
    let center = [
        half + unit * (m.center[0] + m.drift[0] * dz + m.bend[0] * dz * dz),
        half + unit * (m.center[1] + m.drift[1] * dz + m.bend[1] * dz * dz),
    ];
    let size = 1.0 - m.taper * s * s;
    let a_endo = unit * m.radius * size * (1.0 - c);
    let b_endo = a_endo * m.ellipticity;
    // At least 1.5 px so the myocardium still encloses the cavity on small grids.
    let wall = (unit * (m.wall[0] + m.wall[1] * s) * (1.0 + 0.6 * c)).max(MIN_WALL_PX);
    let (a_epi, b_epi) = (a_endo + wall, b_endo + wall);
    let rv_size = m.rv_scale * unit * m.radius * (1.0 - 0.6 * s) * (1.0 - 0.5 * c);
    let (ra, rb) = (rv_size, 0.75 * rv_size);
    let off = a_epi + 0.35 * rb;
    let rv_center = [center[0] + off * m.rv_angle.sin(), center[1] + off * m.rv_angle.cos()];
    SliceGeometry {
        body: Ellipse::new([half, half], 0.44 * n * (1.0 - 0.08 * s), 0.38 * n * (1.0 - 0.08 * s), 0.0),
        endo: Ellipse::new(center, a_endo, b_endo, m.orientation),
        epi: Ellipse::new(center, a_epi, b_epi, m.orientation),
        rv: Ellipse::new(rv_center, rb, ra, m.rv_angle),
        lv_center: center,
    }
}

fn texture(m: &MorphParams, y: f64, x: f64, z: f64, unit: f64) -> f64 {
    let (y, x) = (y / unit, x / unit);
    let sum: f64 = m.texture.iter().map(|k| (k[0] * y + k[1] * x + k[2] * z + k[3]).sin()).sum();
    sum / (m.texture.len().max(1) as f64).sqrt()
}

/// Renders a phantom and its analytic masks. The seed perturbs only the
/// texture phases, so the shape is entirely determined by `spec.morph`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, MaskSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = spec.morph.clone();
    for k in &mut m.texture {
        k[3] += rng.random_range(0.0..2.0 * PI);
    }
    let n = spec.image_size;
    let unit = n as f64 / 64.0;
    let grid = Grid {
        slices: spec.n_slices,
        frames: (spec.n_frames > 1).then_some(spec.n_frames),
        height: n,
        width: n,
    };
    let mut voxels = Vec::with_capacity(grid.len());
    let mut masks = MaskSet::empty(grid);
    let mut idx = 0;
    for z in 0..spec.n_slices {
        for t in 0..spec.n_frames {
            let g = slice_geometry(spec, z as f64, t);
            for i in 0..n {
                for j in 0..n {
                    let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
                    let db = g.body.distance(y, x);
                    let (de, dm, dr) = (g.endo.distance(y, x), g.epi.distance(y, x), g.rv.distance(y, x));
                    let tex = spec.noise_level * texture(&m, y, x, z as f64, unit);
                    let mut v = coverage(db) * (BODY_INTENSITY + tex);
                    let body = coverage(db);
                    v += (RV_INTENSITY - v) * coverage(dr) * body;
                    v += (MYOCARDIUM_INTENSITY + 0.5 * tex - v) * coverage(dm);
                    v += (CAVITY_INTENSITY + 0.5 * tex - v) * coverage(de);
                    voxels.push(v.clamp(0.0, 1.0) as f32);
                    let lvc = de < 0.0;
                    let lvm = dm < 0.0 && !lvc;
                    masks.lvc[idx] = lvc;
                    masks.lvm[idx] = lvm;
                    masks.rvc[idx] = dr < 0.0 && db < 0.0 && !lvc && !lvm;
                    idx += 1;
                }
            }
        }
    }
    let volume = Volume::new(voxels, grid, Spacing::default(), format!("phantom-{seed}"))?;
    Ok((volume, masks))
}

/// Draws a random spec and renders it; subject `i` of a dataset with seed
/// `seed` uses `subject_seed(seed, i)`.
pub fn random_phantom(
    image_size: usize,
    n_slices: usize,
    n_frames: usize,
    noise_level: f64,
    seed: u64,
) -> Result<(PhantomSpec, Volume, MaskSet)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5ca1e);
    let spec = PhantomSpec::random(image_size, n_slices, n_frames, noise_level, &mut rng);
    let (v, m) = generate_phantom(&spec, seed)?;
    Ok((spec, v, m))
}

pub fn subject_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add((index as u64).wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(1))
}

/// Connected component of pixels above `threshold` containing `seed`
/// (4-connectivity). When the seed pixel is below threshold the largest
/// component is returned instead.
pub fn segment_cavity(image: &[f32], h: usize, w: usize, seed: [f64; 2], threshold: f32) -> Vec<bool> {
    let fg: Vec<bool> = image.iter().map(|&v| v > threshold).collect();
    let flood = |start: usize, label: &mut Vec<u32>, id: u32| -> usize {
        let mut stack = vec![start];
        label[start] = id;
        let mut count = 0;
        while let Some(p) = stack.pop() {
            count += 1;
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if fg[q] && label[q] == 0 {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        count
    };
    let mut label = vec![0u32; h * w];
    let sy = (seed[0].floor() as isize).clamp(0, h as isize - 1) as usize;
    let sx = (seed[1].floor() as isize).clamp(0, w as isize - 1) as usize;
    let sp = sy * w + sx;
    if fg[sp] {
        flood(sp, &mut label, 1);
        return label.iter().map(|&l| l == 1).collect();
    }
    let mut best = (0, 0);
    let mut next = 1;
    for p in 0..h * w {
        if fg[p] && label[p] == 0 {
            let size = flood(p, &mut label, next);
            if size > best.0 {
                best = (size, next);
            }
            next += 1;
        }
    }
    label.iter().map(|&l| best.0 > 0 && l == best.1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(frames: usize) -> PhantomSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        PhantomSpec::random(64, 12, frames, 0.03, &mut rng)
    }

    #[test]
    fn deterministic_and_static_layout() {
        let s = spec(1);
        let (a, ma) = generate_phantom(&s, 7).unwrap();
        let (b, mb) = generate_phantom(&s, 7).unwrap();
        assert_eq!(a.voxels, b.voxels);
        assert_eq!(ma, mb);
        assert_eq!(a.grid.frames, None);
        assert_eq!(a.grid.shape(), vec![12, 64, 64]);
        a.validate().unwrap();
    }

    #[test]
    fn masks_are_disjoint_and_nested() {
        let s = spec(4);
        let (_, m) = generate_phantom(&s, 3).unwrap();
        for i in 0..m.lvc.len() {
            let n = m.lvc[i] as u8 + m.lvm[i] as u8 + m.rvc[i] as u8;
            assert!(n <= 1);
        }
        let g = m.grid;
        for z in 0..g.slices {
            for t in 0..g.frame_count() {
                let o = g.offset(z, t);
                for y in 1..g.height - 1 {
                    for x in 1..g.width - 1 {
                        let p = o + y * g.width + x;
                        if m.lvc[p] {
                            for q in [p - 1, p + 1, p - g.width, p + g.width] {
                                assert!(m.lvc[q] || m.lvm[q], "cavity touches non-myocardium");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn systole_shrinks_cavity() {
        let mut s = spec(32);
        s.morph.contraction = 0.3;
        let (_, m) = generate_phantom(&s, 1).unwrap();
        let count = |t: usize| (0..12).map(|z| m.lvc_image(z, t).iter().filter(|&&b| b).count()).sum::<usize>();
        assert!(count(16) < count(0));
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = spec(1);
        s.image_size = 48;
        assert!(generate_phantom(&s, 0).is_err());
        let mut s = spec(1);
        s.noise_level = 0.5;
        assert!(generate_phantom(&s, 0).is_err());
    }

    #[test]
    fn thresholded_cavity_matches_mask() {
        let s = spec(1);
        let (v, m) = generate_phantom(&s, 2).unwrap();
        for z in 0..12 {
            let g = slice_geometry(&s, z as f64, 0);
            let seg = segment_cavity(v.image(z, 0), 64, 64, g.lv_center, CAVITY_THRESHOLD);
            let truth = m.lvc_image(z, 0);
            let inter = seg.iter().zip(truth).filter(|(a, b)| **a && **b).count();
            let dice = 2.0 * inter as f64 / (seg.iter().filter(|&&b| b).count() + truth.iter().filter(|&&b| b).count()) as f64;
            assert!(dice > 0.9, "slice {z}: dice {dice}");
        }
    }
}
