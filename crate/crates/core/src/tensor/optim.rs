//! Adam, parameter EMA and the warmup learning-rate schedule.

use super::{Gradients, ParamId, ParamStore, Real, Tensor};

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        let zeros: Vec<Tensor<S>> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for i in 0..params.len() {
            let Some(g) = grads.param(ParamId(i)) else { continue };
            let p = &mut params.tensors_mut()[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pp, mm), vv), gg) in p.data_mut().iter_mut().zip(m).zip(v).zip(g.data()) {
                let gg = gg.f();
                let mn = b1 * mm.f() + (1.0 - b1) * gg;
                let vn = b2 * vv.f() + (1.0 - b2) * gg * gg;
                *mm = S::of(mn);
                *vv = S::of(vn);
                let upd = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.eps);
                *pp = S::of(pp.f() - upd);
            }
        }
    }
}

/// One EMA step on a single value: `decay * ema + (1 - decay) * param`.
pub fn ema_value(ema: f64, param: f64, decay: f64) -> f64 {
    decay * ema + (1.0 - decay) * param
}

/// Exponential moving average of a parameter store.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    /// Number of updates applied so far.
    pub updates: u64,
    /// Ramp the effective decay as `min(decay, (1 + n) / (10 + n))`.
    pub warmup: bool,
}

impl Ema {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            updates: 0,
            warmup: true,
        }
    }

    pub fn effective_decay(&self) -> f64 {
        if self.warmup {
            let n = self.updates as f64;
            self.decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.decay
        }
    }

    pub fn update<S: Real>(&mut self, ema: &mut ParamStore<S>, params: &ParamStore<S>) {
        let d = self.effective_decay();
        for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
            for (ev, pv) in e.data_mut().iter_mut().zip(p.data()) {
                *ev = S::of(ema_value(ev.f(), pv.f(), d));
            }
        }
        self.updates += 1;
    }
}

/// Linear warmup to `base` over `warmup` steps, constant afterwards. Steps
/// count from 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupSchedule {
    pub base: f64,
    pub warmup: u64,
}

impl WarmupSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup == 0 || step >= self.warmup {
            self.base
        } else {
            self.base * step as f64 / self.warmup as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Ctx, Tape};

    #[test]
    fn ema_closed_form() {
        assert!((ema_value(1.0, 0.0, 0.999) - 0.999).abs() < 1e-15);
        let mut ps = ParamStore::<f64>::new();
        ps.add("w", Tensor::scalar(0.0));
        let mut ema_ps = ParamStore::<f64>::new();
        ema_ps.add("w", Tensor::scalar(1.0));
        let mut ema = Ema::new(0.999);
        ema.warmup = false;
        ema.update(&mut ema_ps, &ps);
        assert!((ema_ps.tensors()[0].data()[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn warmup_is_linear() {
        let s = WarmupSchedule { base: 1e-4, warmup: 50 };
        for k in 1..50 {
            assert!((s.lr(k) - 1e-4 * k as f64 / 50.0).abs() < 1e-18);
        }
        assert_eq!(s.lr(50), 1e-4);
        assert_eq!(s.lr(500), 1e-4);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(&ps);
        for _ in 0..2000 {
            let tape = Tape::new();
            let grads = {
                let cx = Ctx::new(&tape, &ps);
                let loss = cx.p(id).square().sum();
                tape.backward(loss)
            };
            adam.update(&mut ps, &grads, 0.01);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }
}
