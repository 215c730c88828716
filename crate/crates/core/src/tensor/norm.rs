//! Group normalization over `[B, C, ...]` tensors.

use super::{Real, Tensor};

pub(crate) struct GroupNormSaved {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

fn layout<S: Real>(x: &Tensor<S>, groups: usize) -> (usize, usize, usize) {
    let s = x.shape();
    assert!(s.len() >= 2, "group norm expects [B, C, ...]");
    let (b, c) = (s[0], s[1]);
    assert!(groups > 0 && c % groups == 0, "channels {c} not divisible by {groups} groups");
    let spatial: usize = s[2..].iter().product();
    (b, c, spatial)
}

pub(crate) fn forward<S: Real>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    groups: usize,
    eps: f64,
) -> (Tensor<S>, GroupNormSaved) {
    let (b, c, sp) = layout(x, groups);
    let cg = c / groups;
    let len = cg * sp;
    let mut out = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    let xd = x.data();
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cg) * sp;
            let seg = &xd[off..off + len];
            let m = seg.iter().map(|v| v.f()).sum::<f64>() / len as f64;
            let var = seg.iter().map(|v| (v.f() - m).powi(2)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + eps).sqrt();
            mean.push(m);
            rstd.push(r);
            let o = &mut out.data_mut()[off..off + len];
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let gm = gamma.data()[ch].f();
                let bt = beta.data()[ch].f();
                for j in 0..sp {
                    let p = ci * sp + j;
                    o[p] = S::of((seg[p].f() - m) * r * gm + bt);
                }
            }
        }
    }
    (out, GroupNormSaved { mean, rstd })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward<S: Real>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    groups: usize,
    saved: &GroupNormSaved,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (b, c, sp) = layout(x, groups);
    let cg = c / groups;
    let len = cg * sp;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let xd = x.data();
    let dyd = dy.data();
    for bi in 0..b {
        for gi in 0..groups {
            let k = bi * groups + gi;
            let (m, r) = (saved.mean[k], saved.rstd[k]);
            let off = (bi * c + gi * cg) * sp;
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let gm = gamma.data()[ch].f();
                for j in 0..sp {
                    let p = off + ci * sp + j;
                    let xhat = (xd[p].f() - m) * r;
                    let g = dyd[p].f();
                    dgamma[ch] += g * xhat;
                    dbeta[ch] += g;
                    let dxhat = g * gm;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let n = len as f64;
            let o = &mut dx.data_mut()[off..off + len];
            for ci in 0..cg {
                let gm = gamma.data()[gi * cg + ci].f();
                for j in 0..sp {
                    let p = ci * sp + j;
                    let xhat = (xd[off + p].f() - m) * r;
                    let dxhat = dyd[off + p].f() * gm;
                    o[p] = S::of(r / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
                }
            }
        }
    }
    let to = |v: Vec<f64>| Tensor::from_vec(&[c], v.into_iter().map(S::of).collect());
    (dx, to(dgamma), to(dbeta))
}
