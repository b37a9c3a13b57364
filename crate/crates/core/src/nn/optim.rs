use super::{global_norm, n_params, scale, to_flat, Parameters};
use crate::error::{Error, Result};

/// Linear warm-up to `base`, then cosine decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let p = ((step - self.warmup) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn for_params<P: Parameters + ?Sized>(p: &P, weight_decay: f64) -> Self {
        Self::new(n_params(p), weight_decay)
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let g = to_flat(grads);
        if g.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments for {} gradients",
                self.m.len(),
                g.len()
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut i = 0;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, d| {
            for x in d.iter_mut() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= lr * (mh / (vh.sqrt() + eps) + wd * *x);
                i += 1;
            }
        });
        Ok(())
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<P: Parameters + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if n > max_norm {
        scale(grads, max_norm / n);
    }
    n
}

/// Exponential moving average of parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ema {
    pub decay: f64,
}

impl Ema {
    pub fn update<P: Parameters + ?Sized>(&self, shadow: &mut P, params: &P) {
        let p = to_flat(params);
        let d = self.decay;
        let mut i = 0;
        shadow.visit_mut(&mut |_, s| {
            for x in s.iter_mut() {
                *x = d * *x + (1.0 - d) * p[i];
                i += 1;
            }
        });
    }
}
