//! Small hand-written neural-network toolkit: dense layers with batch
//! backprop, named parameter traversal, AdamW with cosine warm-up, global-norm
//! clipping and EMA shadows.

mod mlp;
mod optim;

pub use mlp::{Dense, Mlp, MlpCache};
pub use optim::{clip_global_norm, AdamW, CosineSchedule, Ema};

use crate::error::{Error, Result};

/// Named traversal over every trainable tensor of a model. Gradient buffers
/// reuse the model type, so the same traversal pairs parameters with their
/// gradients by position.
pub trait Parameters {
    /// Calls `f(name, shape, data)` for each tensor in a fixed order.
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));
}

pub fn n_params<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |_, _, d| n += d.len());
    n
}

pub fn to_flat<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(n_params(p));
    p.visit(&mut |_, _, d| out.extend_from_slice(d));
    out
}

pub fn set_flat<P: Parameters + ?Sized>(p: &mut P, flat: &[f64]) -> Result<()> {
    let n = n_params(p);
    if flat.len() != n {
        return Err(Error::Shape(format!("expected {n} parameters, got {}", flat.len())));
    }
    let mut off = 0;
    p.visit_mut(&mut |_, d| {
        d.copy_from_slice(&flat[off..off + d.len()]);
        off += d.len();
    });
    Ok(())
}

pub fn fill<P: Parameters + ?Sized>(p: &mut P, v: f64) {
    p.visit_mut(&mut |_, d| d.iter_mut().for_each(|x| *x = v));
}

/// A zeroed copy, used as a gradient buffer.
pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    fill(&mut z, 0.0);
    z
}

pub fn scale<P: Parameters + ?Sized>(p: &mut P, s: f64) {
    p.visit_mut(&mut |_, d| d.iter_mut().for_each(|x| *x *= s));
}

/// `p += a * q`, tensor by tensor.
pub fn axpy<P: Parameters>(p: &mut P, a: f64, q: &P) {
    let flat = to_flat(q);
    let mut off = 0;
    p.visit_mut(&mut |_, d| {
        for x in d.iter_mut() {
            *x += a * flat[off];
            off += 1;
        }
    });
}

pub fn global_norm<P: Parameters + ?Sized>(p: &P) -> f64 {
    let mut s = 0.0;
    p.visit(&mut |_, _, d| s += d.iter().map(|x| x * x).sum::<f64>());
    s.sqrt()
}

pub fn all_finite<P: Parameters + ?Sized>(p: &P) -> bool {
    let mut ok = true;
    p.visit(&mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
    ok
}

/// Visits `child` with every name prefixed by `prefix.`.
pub fn visit_child(
    prefix: &str,
    child: &dyn Parameters,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    child.visit(&mut |n, s, d| f(&format!("{prefix}.{n}"), s, d));
}

pub fn visit_child_mut(prefix: &str, child: &mut dyn Parameters, f: &mut dyn FnMut(&str, &mut [f64])) {
    child.visit_mut(&mut |n, d| f(&format!("{prefix}.{n}"), d));
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    crate::reward::sigmoid(x)
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
pub fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}
