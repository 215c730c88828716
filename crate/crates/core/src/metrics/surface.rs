use crate::error::{Error, Result};

/// Geometry shared by two masks: row-major dimensions (2 or 3 axes) and
/// physical spacing per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskGrid {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
}

impl MaskGrid {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) || dims.len() != spacing.len() {
            return Err(Error::invalid("mask grid needs 2 or 3 axes with one spacing each"));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("mask spacing must be positive"));
        }
        Ok(Self { dims, spacing })
    }

    pub fn planar(h: usize, w: usize, spacing: f64) -> Self {
        Self {
            dims: vec![h, w],
            spacing: vec![spacing, spacing],
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Physical length of the grid diagonal, used as the distance reported
    /// when exactly one mask is empty.
    pub fn diagonal(&self) -> f64 {
        self.dims
            .iter()
            .zip(&self.spacing)
            .map(|(&n, &s)| (n as f64 * s).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims.len()];
        for i in (0..self.dims.len() - 1).rev() {
            s[i] = s[i + 1] * self.dims[i + 1];
        }
        s
    }

    fn check(&self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.len() {
            return Err(Error::Shape {
                expected: self.dims.clone(),
                got: vec![mask.len()],
            });
        }
        Ok(())
    }
}

/// Boundary voxels: mask voxels with at least one face neighbour outside the
/// mask. Voxels on the grid border count as boundary.
pub fn surface(mask: &[bool], grid: &MaskGrid) -> Result<Vec<bool>> {
    grid.check(mask)?;
    let strides = grid.strides();
    let mut out = vec![false; mask.len()];
    for (i, o) in out.iter_mut().enumerate() {
        if !mask[i] {
            continue;
        }
        *o = grid.dims.iter().zip(&strides).any(|(&n, &st)| {
            let c = (i / st) % n;
            c == 0 || c + 1 == n || !mask[i - st] || !mask[i + st]
        });
    }
    Ok(out)
}

/// One-dimensional squared distance transform of a sampled function
/// (lower envelope of parabolas), with sample spacing `step`.
fn dt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * step;
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let s = loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            // z[0] is -inf, so this never underflows
            if s <= z[k] {
                k -= 1;
            } else {
                break s;
            }
        };
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (physical units) from every voxel to the
/// nearest `true` voxel of `seeds`.
fn squared_edt(seeds: &[bool], grid: &MaskGrid) -> Vec<f64> {
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = grid.strides();
    let max_n = *grid.dims.iter().max().unwrap_or(&1);
    let (mut f, mut out) = (vec![0.0; max_n], vec![0.0; max_n]);
    let (mut v, mut z) = (vec![0usize; max_n], vec![0.0; max_n + 1]);
    for (axis, (&n, &st)) in grid.dims.iter().zip(&strides).enumerate() {
        let step = grid.spacing[axis];
        for start in 0..d.len() {
            if (start / st) % n != 0 {
                continue;
            }
            for i in 0..n {
                f[i] = d[start + i * st];
            }
            dt_line(&f[..n], step, &mut out[..n], &mut v, &mut z);
            for i in 0..n {
                d[start + i * st] = out[i];
            }
        }
    }
    d
}

enum Pair {
    BothEmpty,
    OneEmpty,
    Distances(Vec<f64>),
}

fn directed(a: &[bool], b: &[bool], grid: &MaskGrid) -> Result<Pair> {
    let sa = surface(a, grid)?;
    let sb = surface(b, grid)?;
    match (sa.iter().any(|&x| x), sb.iter().any(|&x| x)) {
        (false, false) => Ok(Pair::BothEmpty),
        (true, true) => {
            let edt = squared_edt(&sb, grid);
            Ok(Pair::Distances(
                sa.iter().zip(&edt).filter(|(s, _)| **s).map(|(_, d)| d.sqrt()).collect(),
            ))
        }
        _ => {
            log::warn!("surface distance between an empty and a non-empty mask; reporting the grid diagonal");
            Ok(Pair::OneEmpty)
        }
    }
}

/// Distances from each surface voxel of `a` to the nearest surface voxel of
/// `b`. Empty when `a` has no surface; errors when only `b` is empty.
pub fn directed_surface_distances(a: &[bool], b: &[bool], grid: &MaskGrid) -> Result<Vec<f64>> {
    match directed(a, b, grid)? {
        Pair::BothEmpty => Ok(Vec::new()),
        Pair::Distances(d) => Ok(d),
        Pair::OneEmpty if !a.iter().any(|&x| x) => Ok(Vec::new()),
        Pair::OneEmpty => Err(Error::invalid("target mask is empty")),
    }
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn mean(d: &[f64]) -> f64 {
    d.iter().sum::<f64>() / d.len() as f64
}

/// Symmetric Hausdorff distance between mask surfaces.
pub fn hausdorff(a: &[bool], b: &[bool], grid: &MaskGrid) -> Result<f64> {
    let max = |d: Vec<f64>| d.into_iter().fold(0.0, f64::max);
    match (directed(a, b, grid)?, directed(b, a, grid)?) {
        (Pair::BothEmpty, _) => Ok(0.0),
        (Pair::Distances(ab), Pair::Distances(ba)) => Ok(max(ab).max(max(ba))),
        _ => Ok(grid.diagonal()),
    }
}

/// Mean directed surface distance from `a` to `b`.
pub fn asd(a: &[bool], b: &[bool], grid: &MaskGrid) -> Result<f64> {
    match directed(a, b, grid)? {
        Pair::BothEmpty => Ok(0.0),
        Pair::OneEmpty => Ok(grid.diagonal()),
        Pair::Distances(d) => Ok(mean(&d)),
    }
}

/// Average of the two directed mean surface distances.
pub fn assd(a: &[bool], b: &[bool], grid: &MaskGrid) -> Result<f64> {
    Ok(0.5 * (asd(a, b, grid)? + asd(b, a, grid)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute_directed(a: &[bool], b: &[bool], grid: &MaskGrid) -> Vec<f64> {
        let sa = surface(a, grid).unwrap();
        let sb = surface(b, grid).unwrap();
        let coords = |i: usize| {
            let w = grid.dims[1];
            ((i / w) as f64 * grid.spacing[0], (i % w) as f64 * grid.spacing[1])
        };
        let bs: Vec<_> = (0..sb.len()).filter(|&i| sb[i]).map(coords).collect();
        (0..sa.len())
            .filter(|&i| sa[i])
            .map(|i| {
                let (y, x) = coords(i);
                bs.iter().map(|&(by, bx)| ((y - by).powi(2) + (x - bx).powi(2)).sqrt()).fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn disjoint_pixels_three_apart() {
        let grid = MaskGrid::planar(8, 8, 1.0);
        let mut a = vec![false; 64];
        let mut b = vec![false; 64];
        a[3 * 8 + 1] = true;
        b[3 * 8 + 4] = true;
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &b, &grid).unwrap(), 3.0);
    }

    #[test]
    fn identical_masks_are_zero() {
        let grid = MaskGrid::planar(10, 10, 1.5);
        let m: Vec<bool> = (0..100).map(|i| (3..7).contains(&(i / 10)) && (2..8).contains(&(i % 10))).collect();
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(hausdorff(&m, &m, &grid).unwrap(), 0.0);
        assert_eq!(asd(&m, &m, &grid).unwrap(), 0.0);
        assert_eq!(assd(&m, &m, &grid).unwrap(), 0.0);
    }

    #[test]
    fn empty_cases() {
        let grid = MaskGrid::planar(4, 4, 1.0);
        let e = vec![false; 16];
        let mut m = e.clone();
        m[5] = true;
        assert_eq!(dice(&e, &e).unwrap(), 1.0);
        assert_eq!(dice(&e, &m).unwrap(), 0.0);
        assert_eq!(hausdorff(&e, &e, &grid).unwrap(), 0.0);
        assert_eq!(hausdorff(&e, &m, &grid).unwrap(), grid.diagonal());
        assert_eq!(assd(&m, &e, &grid).unwrap(), grid.diagonal());
    }

    #[test]
    fn edt_matches_brute_force_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for case in 0..40 {
            let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
            let grid = MaskGrid::new(vec![h, w], vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)]).unwrap();
            let p = rng.random_range(0.05..0.6);
            let a: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
            let b: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
            if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
                continue;
            }
            let fast = directed_surface_distances(&a, &b, &grid).unwrap();
            let slow = brute_directed(&a, &b, &grid);
            assert_eq!(fast.len(), slow.len());
            for (f, s) in fast.iter().zip(&slow) {
                assert!((f - s).abs() < 1e-9, "case {case}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn volumetric_surface_is_hollow() {
        let grid = MaskGrid::new(vec![5, 5, 5], vec![1.0; 3]).unwrap();
        let m = vec![true; 125];
        let s = surface(&m, &grid).unwrap();
        assert_eq!(s.iter().filter(|&&x| x).count(), 125 - 27);
    }
}
