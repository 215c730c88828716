use super::conv::{self, ConvGeom};
use super::norm::{self, GroupNormSaved};
use super::params::{ParamId, ParamStore};
use super::{attention, gemm, Real, Tensor};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

enum Op<S> {
    Leaf { param: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    ChannelBias { x: usize, b: usize },
    ChannelVec { x: usize, v: usize },
    Silu(usize),
    Exp(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    GroupNorm { x: usize, g: usize, b: usize, groups: usize, saved: GroupNormSaved },
    Linear { x: usize, w: usize, b: Option<usize> },
    Upsample(usize),
    Concat(usize, usize),
    Narrow { x: usize, start: usize },
    Reshape(usize),
    Attention { q: usize, k: usize, v: usize, probs: Tensor<S> },
    Sum(usize),
    Mean(usize),
}

struct Node<S> {
    value: Rc<Tensor<S>>,
    op: Op<S>,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape created with [`Tape::inference`] keeps no backward state beyond the
/// node values; calling [`Tape::backward`] on it panics.
pub struct Tape<S: Real> {
    nodes: RefCell<Vec<Node<S>>>,
    record: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Real> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    fn push(&self, value: Tensor<S>, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if self.record { op } else { Op::Leaf { param: None } };
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Rc<Tensor<S>> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Leaf holding a constant (no gradient is reported for it unless asked
    /// through [`Gradients::wrt`]).
    pub fn constant(&self, t: Tensor<S>) -> Var<'_, S> {
        self.push(t, Op::Leaf { param: None })
    }

    pub(crate) fn param_leaf(&self, id: ParamId, t: Tensor<S>) -> Var<'_, S> {
        self.push(t, Op::Leaf { param: Some(id.0) })
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Gradients<S> {
        assert!(self.record, "backward on an inference tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), S::one()));
        let mut leaf_grads = HashMap::new();
        let mut param_grads: HashMap<usize, Tensor<S>> = HashMap::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let v = |i: usize| nodes[i].value.as_ref();
            let mut acc = |i: usize, t: Tensor<S>| match &mut grads[i] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(p) = param {
                        match param_grads.get_mut(p) {
                            Some(e) => e.add_assign(&g),
                            None => {
                                param_grads.insert(*p, g.clone());
                            }
                        }
                    }
                    leaf_grads.insert(id, g);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.map(|x| -x));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(v(*b), |x, y| x * y));
                    acc(*b, g.zip_map(v(*a), |x, y| x * y));
                }
                Op::Scale(a, f) => {
                    let f = S::of(*f);
                    acc(*a, g.map(|x| x * f));
                }
                Op::Offset(a) => acc(*a, g),
                Op::ChannelBias { x, b } => {
                    let c = v(*b).numel();
                    let mut db = vec![S::zero(); c];
                    let per = g.numel() / (g.batch() * c);
                    for (i, chunk) in g.data().chunks(per).enumerate() {
                        db[i % c] += chunk.iter().copied().sum();
                    }
                    acc(*b, Tensor::from_vec(v(*b).shape(), db));
                    acc(*x, g);
                }
                Op::ChannelVec { x, v: vv } => {
                    let bc = v(*vv).numel();
                    let per = g.numel() / bc;
                    let dv: Vec<S> = g.data().chunks(per).map(|c| c.iter().copied().sum()).collect();
                    acc(*vv, Tensor::from_vec(v(*vv).shape(), dv));
                    acc(*x, g);
                }
                Op::Silu(a) => {
                    let d = g.zip_map(v(*a), |gg, x| {
                        let s = S::one() / (S::one() + (-x).exp());
                        gg * s * (S::one() + x * (S::one() - s))
                    });
                    acc(*a, d);
                }
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Clamp { x, lo, hi } => {
                    let (lo, hi) = (S::of(*lo), S::of(*hi));
                    acc(*x, g.zip_map(v(*x), |gg, xx| if xx < lo || xx > hi { S::zero() } else { gg }));
                }
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = conv::backward(v(*x), v(*w), b.is_some(), geom, &g);
                    acc(*x, dx);
                    acc(*w, dw);
                    if let (Some(b), Some(db)) = (b, db) {
                        acc(*b, db);
                    }
                }
                Op::GroupNorm { x, g: gm, b, groups, saved } => {
                    let (dx, dg, db) = norm::backward(v(*x), v(*gm), *groups, saved, &g);
                    acc(*x, dx);
                    acc(*gm, dg);
                    acc(*b, db);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (v(*x), v(*w));
                    let (bsz, din) = (xv.shape()[0], xv.shape()[1]);
                    let dout = wv.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape());
                    gemm(bsz, dout, din, g.data(), false, wv.data(), false, S::zero(), dx.data_mut());
                    let mut dw = Tensor::zeros(wv.shape());
                    gemm(dout, bsz, din, g.data(), true, xv.data(), false, S::zero(), dw.data_mut());
                    if let Some(b) = b {
                        let mut db = vec![S::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (d, &r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        acc(*b, Tensor::from_vec(&[dout], db));
                    }
                    acc(*x, dx);
                    acc(*w, dw);
                }
                Op::Upsample(a) => acc(*a, upsample_backward(&g, v(*a).shape())),
                Op::Concat(a, b) => {
                    let (da, db) = split_channels(&g, v(*a).shape()[1]);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::Narrow { x, start } => {
                    let xs = v(*x).shape().to_vec();
                    acc(*x, narrow_backward(&g, &xs, *start));
                }
                Op::Reshape(a) => {
                    let shape = v(*a).shape().to_vec();
                    acc(*a, g.reshape(&shape));
                }
                Op::Attention { q, k, v: vv, probs } => {
                    let (dq, dk, dv) = attention::backward(v(*q), v(*k), v(*vv), probs, &g);
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*vv, dv);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(*a, Tensor::full(v(*a).shape(), s));
                }
                Op::Mean(a) => {
                    let n = v(*a).numel();
                    let s = g.data()[0] / S::of(n as f64);
                    acc(*a, Tensor::full(v(*a).shape(), s));
                }
            }
        }
        Gradients {
            leaves: leaf_grads,
            params: param_grads,
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S> {
    leaves: HashMap<usize, Tensor<S>>,
    params: HashMap<usize, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id.0)
    }

    /// Gradient with respect to a leaf variable (constant or parameter).
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.leaves.get(&v.id)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn param_norm(&self) -> f64 {
        self.params.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Multiplies every parameter gradient by `f`.
    pub fn scale_params(&mut self, f: f64) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = S::of(x.f() * f));
        }
    }
}

/// Tape plus the parameter store a model reads from during one pass.
pub struct Ctx<'t, S: Real> {
    pub tape: &'t Tape<S>,
    pub params: &'t ParamStore<S>,
    cache: RefCell<HashMap<usize, usize>>,
    trainable: bool,
}

impl<'t, S: Real> Ctx<'t, S> {
    pub fn new(tape: &'t Tape<S>, params: &'t ParamStore<S>) -> Self {
        Self {
            tape,
            params,
            cache: RefCell::new(HashMap::new()),
            trainable: true,
        }
    }

    /// Context whose parameters enter the tape as constants, so no gradient
    /// is attributed to them (frozen networks sharing a tape).
    pub fn frozen(tape: &'t Tape<S>, params: &'t ParamStore<S>) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, params)
        }
    }

    /// Leaf for parameter `id`; repeated requests share one node.
    pub fn p(&self, id: ParamId) -> Var<'t, S> {
        if let Some(&node) = self.cache.borrow().get(&id.0) {
            return Var {
                tape: self.tape,
                id: node,
            };
        }
        let t = self.params.get(id).clone();
        let v = if self.trainable {
            self.tape.param_leaf(id, t)
        } else {
            self.tape.constant(t)
        };
        self.cache.borrow_mut().insert(id.0, v.id);
        v
    }

    pub fn constant(&self, t: Tensor<S>) -> Var<'t, S> {
        self.tape.constant(t)
    }
}

fn upsample_forward<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    let s = x.shape();
    assert_eq!(s.len(), 5, "upsample expects [B, C, D, H, W]");
    let (h, w) = (s[3], s[4]);
    let planes = s[0] * s[1] * s[2];
    let mut out = Vec::with_capacity(x.numel() * 4);
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for row in src.chunks(w) {
            let mut wide = Vec::with_capacity(2 * w);
            for &v in row {
                wide.push(v);
                wide.push(v);
            }
            out.extend_from_slice(&wide);
            out.extend_from_slice(&wide);
        }
    }
    Tensor::from_vec(&[s[0], s[1], s[2], 2 * h, 2 * w], out)
}

fn upsample_backward<S: Real>(g: &Tensor<S>, in_shape: &[usize]) -> Tensor<S> {
    let (h, w) = (in_shape[3], in_shape[4]);
    let planes = in_shape[0] * in_shape[1] * in_shape[2];
    let mut out = Tensor::zeros(in_shape);
    let od = out.data_mut();
    for p in 0..planes {
        let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                od[p * h * w + (y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    out
}

fn split_channels<S: Real>(g: &Tensor<S>, ca: usize) -> (Tensor<S>, Tensor<S>) {
    let s = g.shape();
    let (b, c) = (s[0], s[1]);
    let sp: usize = s[2..].iter().product();
    let mut da = Vec::with_capacity(b * ca * sp);
    let mut db = Vec::with_capacity(b * (c - ca) * sp);
    for item in g.data().chunks(c * sp) {
        da.extend_from_slice(&item[..ca * sp]);
        db.extend_from_slice(&item[ca * sp..]);
    }
    let mut sa = s.to_vec();
    sa[1] = ca;
    let mut sb = s.to_vec();
    sb[1] = c - ca;
    (Tensor::from_vec(&sa, da), Tensor::from_vec(&sb, db))
}

fn narrow_backward<S: Real>(g: &Tensor<S>, xs: &[usize], start: usize) -> Tensor<S> {
    let c = xs[1];
    let len = g.shape()[1];
    let sp: usize = xs[2..].iter().product();
    let mut out = Tensor::zeros(xs);
    for (i, item) in out.data_mut().chunks_mut(c * sp).enumerate() {
        item[start * sp..(start + len) * sp].copy_from_slice(&g.data()[i * len * sp..(i + 1) * len * sp]);
    }
    out
}

impl<'t, S: Real> Var<'t, S> {
    pub fn value(&self) -> Rc<Tensor<S>> {
        self.tape.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Detached copy of the value.
    pub fn tensor(&self) -> Tensor<S> {
        self.value().as_ref().clone()
    }

    fn unary(self, value: Tensor<S>, op: Op<S>) -> Var<'t, S> {
        self.tape.push(value, op)
    }

    pub fn add(self, o: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().zip_map(&o.value(), |a, b| a + b);
        self.unary(v, Op::Add(self.id, o.id))
    }

    pub fn sub(self, o: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().zip_map(&o.value(), |a, b| a - b);
        self.unary(v, Op::Sub(self.id, o.id))
    }

    pub fn mul(self, o: Var<'t, S>) -> Var<'t, S> {
        let v = self.value().zip_map(&o.value(), |a, b| a * b);
        self.unary(v, Op::Mul(self.id, o.id))
    }

    pub fn scale(self, f: f64) -> Var<'t, S> {
        let s = S::of(f);
        let v = self.value().map(|a| a * s);
        self.unary(v, Op::Scale(self.id, f))
    }

    pub fn offset(self, c: f64) -> Var<'t, S> {
        let s = S::of(c);
        let v = self.value().map(|a| a + s);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn silu(self) -> Var<'t, S> {
        let v = self.value().map(|x| x / (S::one() + (-x).exp()));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn exp(self) -> Var<'t, S> {
        let v = self.value().map(|x| x.exp());
        self.unary(v, Op::Exp(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, S> {
        let (l, h) = (S::of(lo), S::of(hi));
        let v = self.value().map(|x| x.max(l).min(h));
        self.unary(v, Op::Clamp { x: self.id, lo, hi })
    }

    pub fn square(self) -> Var<'t, S> {
        self.mul(self)
    }

    /// Adds a per-channel vector `[C]` to a `[B, C, ...]` tensor.
    pub fn add_channel_bias(self, b: Var<'t, S>) -> Var<'t, S> {
        let bv = b.value();
        let mut out = self.tensor();
        let c = bv.numel();
        assert_eq!(out.shape()[1], c, "bias length must equal channel count");
        let per = out.numel() / (out.batch() * c);
        for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let bb = bv.data()[i % c];
            chunk.iter_mut().for_each(|x| *x += bb);
        }
        self.unary(out, Op::ChannelBias { x: self.id, b: b.id })
    }

    /// Adds a `[B, C]` tensor to every spatial position of a `[B, C, ...]` tensor.
    pub fn add_channel_vec(self, v: Var<'t, S>) -> Var<'t, S> {
        let vv = v.value();
        let mut out = self.tensor();
        assert_eq!(&out.shape()[..2], vv.shape(), "channel vector must be [B, C]");
        let per = out.numel() / vv.numel();
        for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
            let a = vv.data()[i];
            chunk.iter_mut().for_each(|x| *x += a);
        }
        self.unary(out, Op::ChannelVec { x: self.id, v: v.id })
    }

    pub fn conv(self, w: Var<'t, S>, b: Option<Var<'t, S>>, geom: ConvGeom) -> Var<'t, S> {
        let bv = b.map(|b| b.value());
        let out = conv::forward(&self.value(), &w.value(), bv.as_deref(), &geom);
        self.unary(
            out,
            Op::Conv {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
            },
        )
    }

    pub fn group_norm(self, gamma: Var<'t, S>, beta: Var<'t, S>, groups: usize, eps: f64) -> Var<'t, S> {
        let (out, saved) = norm::forward(&self.value(), &gamma.value(), &beta.value(), groups, eps);
        self.unary(
            out,
            Op::GroupNorm {
                x: self.id,
                g: gamma.id,
                b: beta.id,
                groups,
                saved,
            },
        )
    }

    /// `[B, In] x [Out, In]^T + b`.
    pub fn linear(self, w: Var<'t, S>, b: Option<Var<'t, S>>) -> Var<'t, S> {
        let (xv, wv) = (self.value(), w.value());
        assert_eq!(xv.shape().len(), 2, "linear expects [B, In]");
        let (bsz, din) = (xv.shape()[0], xv.shape()[1]);
        let dout = wv.shape()[0];
        assert_eq!(wv.shape()[1], din, "linear weight shape mismatch");
        let mut out = Tensor::zeros(&[bsz, dout]);
        gemm(bsz, din, dout, xv.data(), false, wv.data(), true, S::zero(), out.data_mut());
        if let Some(b) = b {
            let bv = b.value();
            for row in out.data_mut().chunks_mut(dout) {
                for (r, &bb) in row.iter_mut().zip(bv.data()) {
                    *r += bb;
                }
            }
        }
        self.unary(
            out,
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
        )
    }

    /// Nearest-neighbour 2x upsampling of the height and width axes.
    pub fn upsample2x(self) -> Var<'t, S> {
        let out = upsample_forward(&self.value());
        self.unary(out, Op::Upsample(self.id))
    }

    /// Concatenation along the channel axis.
    pub fn concat(self, o: Var<'t, S>) -> Var<'t, S> {
        let (a, b) = (self.value(), o.value());
        let (sa, sb) = (a.shape(), b.shape());
        assert_eq!(sa[0], sb[0], "concat batch mismatch");
        assert_eq!(&sa[2..], &sb[2..], "concat spatial mismatch: {sa:?} vs {sb:?}");
        let sp: usize = sa[2..].iter().product();
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for i in 0..sa[0] {
            data.extend_from_slice(&a.data()[i * sa[1] * sp..(i + 1) * sa[1] * sp]);
            data.extend_from_slice(&b.data()[i * sb[1] * sp..(i + 1) * sb[1] * sp]);
        }
        let mut shape = sa.to_vec();
        shape[1] += sb[1];
        self.unary(Tensor::from_vec(&shape, data), Op::Concat(self.id, o.id))
    }

    /// Channels `start..start + len`.
    pub fn narrow(self, start: usize, len: usize) -> Var<'t, S> {
        let x = self.value();
        let s = x.shape();
        assert!(start + len <= s[1], "narrow out of range");
        let sp: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(s[0] * len * sp);
        for item in x.data().chunks(s[1] * sp) {
            data.extend_from_slice(&item[start * sp..(start + len) * sp]);
        }
        let mut shape = s.to_vec();
        shape[1] = len;
        self.unary(Tensor::from_vec(&shape, data), Op::Narrow { x: self.id, start })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, S> {
        let out = self.tensor().reshape(shape);
        self.unary(out, Op::Reshape(self.id))
    }

    /// Self-attention with `q`, `k`, `v` shaped `[B, C, N]`.
    pub fn attention(q: Var<'t, S>, k: Var<'t, S>, v: Var<'t, S>) -> Var<'t, S> {
        let (out, probs) = attention::forward(&q.value(), &k.value(), &v.value());
        let probs = if q.tape.record { probs } else { Tensor::zeros(&[0]) };
        q.unary(
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                probs,
            },
        )
    }

    pub fn sum(self) -> Var<'t, S> {
        let s = self.value().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t, S> {
        let x = self.value();
        let s = x.sum() / S::of(x.numel() as f64);
        self.unary(Tensor::scalar(s), Op::Mean(self.id))
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.value().data()[0].f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type OpFn = for<'a> fn(&'a Tape<f64>, Var<'a, f64>) -> Var<'a, f64>;

    // weighted sum so every output element matters
    fn weighted<'a>(t: &'a Tape<f64>, x: Var<'a, f64>, f: OpFn) -> Var<'a, f64> {
        let y = f(t, x);
        let n = y.value().numel();
        let w = t.constant(Tensor::from_vec(&y.shape(), (0..n).map(|i| (i as f64 * 0.31).cos()).collect()));
        y.mul(w).sum()
    }

    fn check_op(shape: &[usize], f: OpFn) {
        let n: usize = shape.iter().product();
        let x0: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.37 + 0.2).sin()).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(shape, x0.clone()));
        let l = weighted(&tape, x, f);
        let g = tape.backward(l).wrt(x).expect("grad").clone();
        for i in 0..n {
            let h = 1e-6;
            let eval = |d: f64| {
                let mut xv = x0.clone();
                xv[i] += d;
                let t = Tape::new();
                let xx = t.constant(Tensor::from_vec(shape, xv));
                weighted(&t, xx, f).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "element {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn elementwise_gradients() {
        check_op(&[2, 3], |_, x| x.silu());
        check_op(&[2, 3], |_, x| x.exp());
        check_op(&[2, 3], |_, x| x.square().scale(0.5).offset(1.0));
        check_op(&[2, 3], |_, x| x.clamp(-0.5, 0.5));
    }

    #[test]
    fn structural_gradients() {
        check_op(&[2, 3, 1, 2, 2], |_, x| x.upsample2x());
        check_op(&[2, 4, 1, 2, 2], |_, x| x.narrow(1, 2).concat(x));
        check_op(&[2, 4, 1, 2, 2], |t, x| {
            let b = t.constant(Tensor::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]));
            x.add_channel_bias(b).square()
        });
        check_op(&[2, 4], |t, v| {
            let x = t.constant(Tensor::full(&[2, 4, 1, 2, 2], 0.3));
            x.add_channel_vec(v).square()
        });
    }

    #[test]
    fn conv_and_norm_gradients() {
        check_op(&[2, 4, 2, 4, 4], |t, x| {
            let g = t.constant(Tensor::from_vec(&[4], vec![1.0, 0.5, -0.7, 2.0]));
            let b = t.constant(Tensor::from_vec(&[4], vec![0.1, 0.0, 0.2, -0.1]));
            x.group_norm(g, b, 2, 1e-5)
        });
        check_op(&[1, 2, 2, 4, 4], |t, x| {
            let w = t.constant(Tensor::from_vec(&[3, 2, 3, 3, 3], (0..162).map(|i| (i as f64 * 0.11).sin()).collect()));
            let b = t.constant(Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
            let geom = ConvGeom { kernel: [3, 3, 3], stride: [1, 2, 2], pad: [1, 1, 1] };
            x.conv(w, Some(b), geom)
        });
    }

    #[test]
    fn linear_and_attention_gradients() {
        check_op(&[3, 4], |t, x| {
            let w = t.constant(Tensor::from_vec(&[2, 4], (0..8).map(|i| i as f64 * 0.1 - 0.3).collect()));
            let b = t.constant(Tensor::from_vec(&[2], vec![0.5, -0.5]));
            x.linear(w, Some(b))
        });
        check_op(&[2, 3, 5], |t, x| {
            let k = t.constant(Tensor::from_vec(&[2, 3, 5], (0..30).map(|i| (i as f64 * 0.7).cos()).collect()));
            Var::attention(x, k, x.scale(0.5))
        });
        check_op(&[2, 3, 5], |t, x| {
            let q = t.constant(Tensor::from_vec(&[2, 3, 5], (0..30).map(|i| (i as f64 * 0.3).sin()).collect()));
            Var::attention(q, x, q)
        });
    }

    #[test]
    fn param_grads_accumulate_across_uses() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &ps);
        let a = cx.p(id);
        let b = cx.p(id);
        let loss = a.mul(b).sum();
        let g = tape.backward(loss);
        assert_eq!(g.param(id).unwrap().data(), &[2.0, 4.0]);
    }
}
