//! Volumetric convolution via im2col + GEMM.

use super::{gemm, Real, Tensor};
use crate::parallel;

/// Kernel, stride and zero-padding along (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn out_dims(&self, d: usize, h: usize, w: usize) -> [usize; 3] {
        let o = |i: usize, ax: usize| (i + 2 * self.pad[ax] - self.kernel[ax]) / self.stride[ax] + 1;
        [o(d, 0), o(h, 1), o(w, 2)]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }
}

struct Dims {
    ci: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Dims {
    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_len(&self) -> usize {
        self.out.iter().product()
    }
}

fn im2col<S: Real>(x: &[S], dims: &Dims, g: &ConvGeom, cols: &mut [S]) {
    let [id, ih, iw] = dims.inp;
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let n = dims.out_len();
    let mut row = 0;
    for c in 0..dims.ci {
        let xc = &x[c * dims.in_len()..(c + 1) * dims.in_len()];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let mut p = 0;
                    for zd in 0..od {
                        let zi = (zd * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            dst[p..p + oh * ow].fill(S::zero());
                            p += oh * ow;
                            continue;
                        }
                        let plane = &xc[zi as usize * ih * iw..(zi as usize + 1) * ih * iw];
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                dst[p..p + ow].fill(S::zero());
                                p += ow;
                                continue;
                            }
                            let line = &plane[yi as usize * iw..(yi as usize + 1) * iw];
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                dst[p] = if xi < 0 || xi >= iw as isize {
                                    S::zero()
                                } else {
                                    line[xi as usize]
                                };
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<S: Real>(cols: &[S], dims: &Dims, g: &ConvGeom, dx: &mut [S]) {
    let [id, ih, iw] = dims.inp;
    let [od, oh, ow] = dims.out;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    let n = dims.out_len();
    let mut row = 0;
    for c in 0..dims.ci {
        let xc = &mut dx[c * dims.in_len()..(c + 1) * dims.in_len()];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src = &cols[row * n..(row + 1) * n];
                    let mut p = 0;
                    for zd in 0..od {
                        let zi = (zd * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            p += oh * ow;
                            continue;
                        }
                        let base = zi as usize * ih * iw;
                        for yo in 0..oh {
                            let yi = (yo * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                p += ow;
                                continue;
                            }
                            let lb = base + yi as usize * iw;
                            for xo in 0..ow {
                                let xi = (xo * sw + e) as isize - pw as isize;
                                if xi >= 0 && xi < iw as isize {
                                    xc[lb + xi as usize] += src[p];
                                }
                                p += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn dims_of<S: Real>(x: &Tensor<S>, w: &Tensor<S>, g: &ConvGeom) -> Dims {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 5, "conv input must be [B, C, D, H, W], got {xs:?}");
    assert_eq!(ws.len(), 5, "conv weight must be [Co, Ci, kd, kh, kw]");
    assert_eq!(xs[1], ws[1], "conv channel mismatch: input {xs:?}, weight {ws:?}");
    assert_eq!(&ws[2..], &g.kernel, "conv weight does not match kernel geometry");
    for ax in 0..3 {
        assert!(
            xs[2 + ax] + 2 * g.pad[ax] >= g.kernel[ax],
            "conv input {xs:?} smaller than kernel {:?}",
            g.kernel
        );
    }
    Dims {
        ci: xs[1],
        inp: [xs[2], xs[3], xs[4]],
        out: g.out_dims(xs[2], xs[3], xs[4]),
    }
}

pub(crate) fn forward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    g: &ConvGeom,
) -> Tensor<S> {
    let dims = dims_of(x, w, g);
    let b = x.shape()[0];
    let co = w.shape()[0];
    let k = dims.ci * g.taps();
    let n = dims.out_len();
    let in_item = dims.ci * dims.in_len();
    let mut out = Tensor::zeros(&[b, co, dims.out[0], dims.out[1], dims.out[2]]);
    let xd = x.data();
    let wd = w.data();
    parallel::for_each_chunk_mut(out.data_mut(), co * n, |i, y| {
        let xi = &xd[i * in_item..(i + 1) * in_item];
        if g.is_pointwise() {
            gemm(co, k, n, wd, false, xi, false, S::zero(), y);
        } else {
            let mut cols = vec![S::zero(); k * n];
            im2col(xi, &dims, g, &mut cols);
            gemm(co, k, n, wd, false, &cols, false, S::zero(), y);
        }
        if let Some(bias) = bias {
            for (c, yc) in y.chunks_mut(n).enumerate() {
                let bc = bias.data()[c];
                yc.iter_mut().for_each(|v| *v += bc);
            }
        }
    });
    out
}

/// Returns `(dx, dw, dbias)`.
pub(crate) fn backward<S: Real>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    has_bias: bool,
    g: &ConvGeom,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Option<Tensor<S>>) {
    let dims = dims_of(x, w, g);
    let b = x.shape()[0];
    let co = w.shape()[0];
    let k = dims.ci * g.taps();
    let n = dims.out_len();
    let in_item = dims.ci * dims.in_len();
    let xd = x.data();
    let wd = w.data();
    let dyd = dy.data();

    let parts = parallel::map_indices(b, |i| {
        let xi = &xd[i * in_item..(i + 1) * in_item];
        let dyi = &dyd[i * co * n..(i + 1) * co * n];
        let mut dw = vec![S::zero(); co * k];
        let mut dxi = vec![S::zero(); in_item];
        if g.is_pointwise() {
            gemm(co, n, k, dyi, false, xi, true, S::zero(), &mut dw);
            gemm(k, co, n, wd, true, dyi, false, S::zero(), &mut dxi);
        } else {
            let mut cols = vec![S::zero(); k * n];
            im2col(xi, &dims, g, &mut cols);
            gemm(co, n, k, dyi, false, &cols, true, S::zero(), &mut dw);
            gemm(k, co, n, wd, true, dyi, false, S::zero(), &mut cols);
            col2im(&cols, &dims, g, &mut dxi);
        }
        (dxi, dw)
    });
    let mut dx = Vec::with_capacity(b * in_item);
    let mut dw = Tensor::zeros(w.shape());
    for (dxi, part) in &parts {
        dx.extend_from_slice(dxi);
        for (a, &p) in dw.data_mut().iter_mut().zip(part) {
            *a += p;
        }
    }
    let dx = Tensor::from_vec(x.shape(), dx);
    let db = has_bias.then(|| {
        let mut db = Tensor::zeros(&[co]);
        for i in 0..b {
            for c in 0..co {
                let s: S = dyd[(i * co + c) * n..(i * co + c + 1) * n].iter().copied().sum();
                db.data_mut()[c] += s;
            }
        }
        db
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, g: &ConvGeom) -> Tensor<f64> {
        let xs = x.shape();
        let ws = w.shape();
        let [od, oh, ow] = g.out_dims(xs[2], xs[3], xs[4]);
        let mut out = Tensor::zeros(&[xs[0], ws[0], od, oh, ow]);
        let at = |b: usize, c: usize, d: isize, h: isize, ww: isize| -> f64 {
            if d < 0 || h < 0 || ww < 0 || d >= xs[2] as isize || h >= xs[3] as isize || ww >= xs[4] as isize {
                return 0.0;
            }
            x.data()[(((b * xs[1] + c) * xs[2] + d as usize) * xs[3] + h as usize) * xs[4] + ww as usize]
        };
        let mut idx = 0;
        for b in 0..xs[0] {
            for o in 0..ws[0] {
                for zd in 0..od {
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let mut s = 0.0;
                            for c in 0..ws[1] {
                                for a in 0..ws[2] {
                                    for bb in 0..ws[3] {
                                        for e in 0..ws[4] {
                                            let wv = w.data()[(((o * ws[1] + c) * ws[2] + a) * ws[3] + bb) * ws[4] + e];
                                            s += wv * at(
                                                b,
                                                c,
                                                (zd * g.stride[0] + a) as isize - g.pad[0] as isize,
                                                (yo * g.stride[1] + bb) as isize - g.pad[1] as isize,
                                                (xo * g.stride[2] + e) as isize - g.pad[2] as isize,
                                            );
                                        }
                                    }
                                }
                            }
                            out.data_mut()[idx] = s;
                            idx += 1;
                        }
                    }
                }
            }
        }
        out
    }

    fn filled(shape: &[usize], seed: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i as f64 + seed) * 0.7).sin()).collect())
    }

    #[test]
    fn matches_naive_strided_3d() {
        let x = filled(&[2, 3, 3, 6, 5], 0.3);
        let g = ConvGeom { kernel: [3, 3, 3], stride: [1, 2, 2], pad: [1, 1, 1] };
        let w = filled(&[4, 3, 3, 3, 3], 1.1);
        let y = forward(&x, &w, None, &g);
        let r = naive(&x, &w, &g);
        assert_eq!(y.shape(), r.shape());
        for (a, b) in y.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), dy> = <x, dx> for the linear map x -> conv(x) (no bias)
        let x = filled(&[2, 2, 1, 5, 5], 0.1);
        let w = filled(&[3, 2, 1, 3, 3], 2.0);
        let g = ConvGeom { kernel: [1, 3, 3], stride: [1, 2, 2], pad: [0, 1, 1] };
        let y = forward(&x, &w, None, &g);
        let dy = filled(y.shape(), 5.0);
        let (dx, dw, _) = backward(&x, &w, false, &g, &dy);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        let rhs_w: f64 = w.data().iter().zip(dw.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
