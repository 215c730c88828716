//! Building blocks shared by the autoencoder, the denoiser and the
//! conditioning networks.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`] and read their weights
//! through a [`Ctx`] on every forward pass.

use crate::tensor::{ConvGeom, Ctx, ParamId, ParamStore, Real, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Convolution dimensionality. `Planar` convolves height and width only;
/// `Volumetric` also convolves the depth axis (time for 2D+T data) while
/// keeping its resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Dims {
    #[default]
    #[serde(rename = "2")]
    Planar,
    #[serde(rename = "3")]
    Volumetric,
}

impl Dims {
    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            2 => Some(Self::Planar),
            3 => Some(Self::Volumetric),
            _ => None,
        }
    }

    pub fn count(self) -> usize {
        match self {
            Self::Planar => 2,
            Self::Volumetric => 3,
        }
    }

    /// Geometry of a `k×k` (×`k` in depth) convolution with "same" padding
    /// and the given in-plane stride.
    pub fn geom(self, k: usize, stride: usize) -> ConvGeom {
        let (kd, pd) = match self {
            Self::Planar => (1, 0),
            Self::Volumetric => (k, k / 2),
        };
        ConvGeom {
            kernel: [kd, k, k],
            stride: [1, stride, stride],
            pad: [pd, k / 2, k / 2],
        }
    }
}

/// How a planar kernel fills the depth taps of its volumetric counterpart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Inflation {
    /// Same kernel on every tap. On a single-frame block only the centre tap
    /// sees data, so both builds compute the same function.
    Broadcast,
    /// Kernel on the centre tap, zeros elsewhere: every frame is first
    /// processed on its own.
    Centre,
}

/// Copies planar weights into a volumetric store of the same architecture,
/// expanding every `[O, I, 1, k, k]` kernel along the depth taps.
pub fn inflate_planar<S: Real>(planar: &ParamStore<S>, volumetric: &mut ParamStore<S>, mode: Inflation) -> crate::Result<()> {
    if planar.names() != volumetric.names() {
        return Err(crate::Error::invalid("parameter stores describe different architectures"));
    }
    for (src, dst) in planar.tensors().iter().zip(volumetric.tensors_mut()) {
        let (a, b) = (src.shape(), dst.shape().to_vec());
        if a == b.as_slice() {
            *dst = src.clone();
        } else if a.len() == 5 && b.len() == 5 && a[2] == 1 && a[..2] == b[..2] && a[3..] == b[3..] {
            let plane = a[3] * a[4];
            let zeros = vec![S::zero(); plane];
            let mut data = Vec::with_capacity(dst.data().len());
            for kernel in src.data().chunks(plane) {
                for tap in 0..b[2] {
                    let on = mode == Inflation::Broadcast || tap == b[2] / 2;
                    data.extend_from_slice(if on { kernel } else { &zeros });
                }
            }
            *dst = Tensor::from_vec(&b, data);
        } else {
            return Err(crate::Error::Shape { expected: b, got: a.to_vec() });
        }
    }
    Ok(())
}

/// Weight initialisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in ±1/√fan_in for weights and biases.
    Default,
    /// All zeros (zero-convolution / zero projection).
    Zero,
}

/// Creates parameters under a dotted name prefix.
pub struct Builder<'a, S: Real, R: Rng> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, S: Real, R: Rng> Builder<'a, S, R> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut R) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, S, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn name(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn uniform(&mut self, leaf: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(self.rng.random_range(-bound..=bound))).collect();
        let name = self.name(leaf);
        self.store.add(name, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, leaf: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, Tensor::full(shape, S::of(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl Conv {
    pub fn new<S: Real, R: Rng>(
        bd: &mut Builder<'_, S, R>,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        init: Init,
    ) -> Self {
        let shape = [cout, cin, geom.kernel[0], geom.kernel[1], geom.kernel[2]];
        let fan_in = (cin * geom.kernel.iter().product::<usize>()) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let (w, b) = match init {
            Init::Default => (bd.uniform("weight", &shape, bound), bd.uniform("bias", &[cout], bound)),
            Init::Zero => (bd.constant("weight", &shape, 0.0), bd.constant("bias", &[cout], 0.0)),
        };
        Self { w, b, geom }
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        x.conv(cx.p(self.w), Some(cx.p(self.b)), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new<S: Real, R: Rng>(bd: &mut Builder<'_, S, R>, din: usize, dout: usize) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        Self {
            w: bd.uniform("weight", &[dout, din], bound),
            b: bd.uniform("bias", &[dout], bound),
        }
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        x.linear(cx.p(self.w), Some(cx.p(self.b)))
    }
}

/// Largest group count in {8, 4, 2, 1} dividing `channels`.
pub fn norm_groups(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    g: ParamId,
    b: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<S: Real, R: Rng>(bd: &mut Builder<'_, S, R>, channels: usize) -> Self {
        Self {
            g: bd.constant("gamma", &[channels], 1.0),
            b: bd.constant("beta", &[channels], 0.0),
            groups: norm_groups(channels),
        }
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        x.group_norm(cx.p(self.g), cx.p(self.b), self.groups, 1e-6)
    }
}

/// Pre-activation residual block with an optional additive time embedding.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    pub fn new<S: Real, R: Rng>(
        bd: &mut Builder<'_, S, R>,
        dims: Dims,
        cin: usize,
        cout: usize,
        temb_dim: Option<usize>,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(&mut bd.sub("norm1"), cin),
            conv1: Conv::new(&mut bd.sub("conv1"), cin, cout, dims.geom(3, 1), Init::Default),
            temb: temb_dim.map(|d| Linear::new(&mut bd.sub("temb"), d, cout)),
            norm2: GroupNorm::new(&mut bd.sub("norm2"), cout),
            conv2: Conv::new(&mut bd.sub("conv2"), cout, cout, dims.geom(3, 1), Init::Default),
            skip: (cin != cout).then(|| Conv::new(&mut bd.sub("skip"), cin, cout, dims.geom(1, 1), Init::Default)),
        }
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>, temb: Option<Var<'t, S>>) -> Var<'t, S> {
        let mut h = self.conv1.forward(cx, self.norm1.forward(cx, x).silu());
        if let (Some(proj), Some(t)) = (&self.temb, temb) {
            h = h.add_channel_vec(proj.forward(cx, t.silu()));
        }
        let h = self.conv2.forward(cx, self.norm2.forward(cx, h).silu());
        let skip = match &self.skip {
            Some(s) => s.forward(cx, x),
            None => x,
        };
        skip.add(h)
    }
}

/// Single-head self-attention over all positions of a feature map.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    norm: GroupNorm,
    qkv: Conv,
    proj: Conv,
    channels: usize,
}

impl AttnBlock {
    pub fn new<S: Real, R: Rng>(bd: &mut Builder<'_, S, R>, dims: Dims, channels: usize) -> Self {
        Self {
            norm: GroupNorm::new(&mut bd.sub("norm"), channels),
            qkv: Conv::new(&mut bd.sub("qkv"), channels, 3 * channels, dims.geom(1, 1), Init::Default),
            proj: Conv::new(&mut bd.sub("proj"), channels, channels, dims.geom(1, 1), Init::Default),
            channels,
        }
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        let shape = x.shape();
        let c = self.channels;
        let n: usize = shape[2..].iter().product();
        let qkv = self.qkv.forward(cx, self.norm.forward(cx, x));
        let flat = |v: Var<'t, S>| v.reshape(&[shape[0], c, n]);
        let q = flat(qkv.narrow(0, c));
        let k = flat(qkv.narrow(c, c));
        let v = flat(qkv.narrow(2 * c, c));
        let h = Var::attention(q, k, v).reshape(&shape);
        x.add(self.proj.forward(cx, h))
    }
}

/// Strided 3×3 convolution halving height and width.
#[derive(Clone, Debug)]
pub struct Downsample(Conv);

impl Downsample {
    pub fn new<S: Real, R: Rng>(bd: &mut Builder<'_, S, R>, dims: Dims, channels: usize) -> Self {
        Self(Conv::new(bd, channels, channels, dims.geom(3, 2), Init::Default))
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        self.0.forward(cx, x)
    }
}

/// Nearest-neighbour 2× upsampling followed by a 3×3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample(Conv);

impl Upsample {
    pub fn new<S: Real, R: Rng>(bd: &mut Builder<'_, S, R>, dims: Dims, channels: usize) -> Self {
        Self(Conv::new(bd, channels, channels, dims.geom(3, 1), Init::Default))
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, x: Var<'t, S>) -> Var<'t, S> {
        self.0.forward(cx, x.upsample2x())
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `[B, dim]`.
pub fn timestep_embedding<S: Real>(t: &[f64], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tt in t {
        let mut row = vec![S::zero(); dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = S::of((tt * freq).cos());
            row[half + i] = S::of((tt * freq).sin());
        }
        data.extend(row);
    }
    Tensor::from_vec(&[t.len(), dim], data)
}

/// Sinusoidal features followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct TimeEmbed {
    l1: Linear,
    l2: Linear,
    freq_dim: usize,
}

impl TimeEmbed {
    pub fn new<S: Real, R: Rng>(bd: &mut Builder<'_, S, R>, freq_dim: usize, dim: usize) -> Self {
        Self {
            l1: Linear::new(&mut bd.sub("l1"), freq_dim, dim),
            l2: Linear::new(&mut bd.sub("l2"), dim, dim),
            freq_dim,
        }
    }

    pub fn forward<'t, S: Real>(&self, cx: &Ctx<'t, S>, t: &[f64]) -> Var<'t, S> {
        let f = cx.constant(timestep_embedding(t, self.freq_dim));
        self.l2.forward(cx, self.l1.forward(cx, f).silu())
    }
}
