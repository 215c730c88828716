//! Fused single-head scaled dot-product self-attention over `[B, C, N]`.

use super::{gemm, Real, Tensor};
use crate::parallel;

fn dims<S: Real>(q: &Tensor<S>) -> (usize, usize, usize) {
    let s = q.shape();
    assert_eq!(s.len(), 3, "attention expects [B, C, N]");
    (s[0], s[1], s[2])
}

/// Returns the output and the row-stochastic attention matrices `[B, N, N]`.
pub(crate) fn forward<S: Real>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let (b, c, n) = dims(q);
    assert_eq!(k.shape(), q.shape());
    assert_eq!(v.shape(), q.shape());
    let scale = S::of(1.0 / (c as f64).sqrt());
    let per = c * n;
    let items = parallel::map_indices(b, |i| {
        let qi = &q.data()[i * per..(i + 1) * per];
        let ki = &k.data()[i * per..(i + 1) * per];
        let vi = &v.data()[i * per..(i + 1) * per];
        // scores[a, j] = sum_c q[c, a] k[c, j]
        let mut p = vec![S::zero(); n * n];
        gemm(n, c, n, qi, true, ki, false, S::zero(), &mut p);
        for row in p.chunks_mut(n) {
            let mx = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x * scale));
            let mut z = S::zero();
            for x in row.iter_mut() {
                *x = (*x * scale - mx).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        // out[c, a] = sum_j v[c, j] p[a, j]
        let mut o = vec![S::zero(); per];
        gemm(c, n, n, vi, false, &p, true, S::zero(), &mut o);
        (o, p)
    });
    let mut out = Vec::with_capacity(b * per);
    let mut probs = Vec::with_capacity(b * n * n);
    for (o, p) in items {
        out.extend(o);
        probs.extend(p);
    }
    (
        Tensor::from_vec(&[b, c, n], out),
        Tensor::from_vec(&[b, n, n], probs),
    )
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn backward<S: Real>(
    q: &Tensor<S>,
    k: &Tensor<S>,
    v: &Tensor<S>,
    probs: &Tensor<S>,
    dout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (b, c, n) = dims(q);
    let scale = S::of(1.0 / (c as f64).sqrt());
    let per = c * n;
    let items = parallel::map_indices(b, |i| {
        let qi = &q.data()[i * per..(i + 1) * per];
        let ki = &k.data()[i * per..(i + 1) * per];
        let vi = &v.data()[i * per..(i + 1) * per];
        let pi = &probs.data()[i * n * n..(i + 1) * n * n];
        let gi = &dout.data()[i * per..(i + 1) * per];
        // dv[c, j] = sum_a dout[c, a] p[a, j]
        let mut dv = vec![S::zero(); per];
        gemm(c, n, n, gi, false, pi, false, S::zero(), &mut dv);
        // dp[a, j] = sum_c dout[c, a] v[c, j]
        let mut ds = vec![S::zero(); n * n];
        gemm(n, c, n, gi, true, vi, false, S::zero(), &mut ds);
        for (drow, prow) in ds.chunks_mut(n).zip(pi.chunks(n)) {
            let dot: S = drow.iter().zip(prow).map(|(&d, &p)| d * p).sum();
            for (d, &p) in drow.iter_mut().zip(prow) {
                *d = p * (*d - dot) * scale;
            }
        }
        // dq[c, a] = sum_j k[c, j] ds[a, j];  dk[c, j] = sum_a q[c, a] ds[a, j]
        let mut dq = vec![S::zero(); per];
        gemm(c, n, n, ki, false, &ds, true, S::zero(), &mut dq);
        let mut dk = vec![S::zero(); per];
        gemm(c, n, n, qi, false, &ds, false, S::zero(), &mut dk);
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(b * per);
    let mut dk = Vec::with_capacity(b * per);
    let mut dv = Vec::with_capacity(b * per);
    for (a, bb, cc) in items {
        dq.extend(a);
        dk.extend(bb);
        dv.extend(cc);
    }
    let s = [b, c, n];
    (
        Tensor::from_vec(&s, dq),
        Tensor::from_vec(&s, dk),
        Tensor::from_vec(&s, dv),
    )
}
