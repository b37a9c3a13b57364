use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{silu, silu_grad, visit_child, visit_child_mut, Parameters};

/// Affine layer `y = x W + b` over a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let lim = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = Array2::from_shape_fn((n_in, n_out), |_| rng.random_range(-lim..lim));
        Self {
            w,
            b: Array1::zeros(n_out),
        }
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Array2::zeros((n_in, n_out)),
            b: Array1::zeros(n_out),
        }
    }

    pub fn n_in(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients for upstream gradient `gz` at input
    /// `x`, and returns the gradient with respect to `x` when asked.
    pub fn backward(&self, x: &Array2<f64>, gz: &Array2<f64>, grads: &mut Dense, want_input: bool) -> Option<Array2<f64>> {
        grads.w += &x.t().dot(gz);
        grads.b += &gz.sum_axis(Axis(0));
        want_input.then(|| gz.dot(&self.w.t()))
    }
}

impl Parameters for Dense {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f("w", self.w.shape(), self.w.as_slice().expect("standard layout"));
        f("b", self.b.shape(), self.b.as_slice().expect("standard layout"));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("w", self.w.as_slice_mut().expect("standard layout"));
        f("b", self.b.as_slice_mut().expect("standard layout"));
    }
}

/// Multilayer perceptron with SiLU between layers and optionally after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub act_last: bool,
}

/// Forward intermediates needed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pub pre: Vec<Array2<f64>>,
    /// Output of each layer after its activation (if any).
    pub outputs: Vec<Array2<f64>>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], act_last: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least one layer");
        let layers = sizes.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Self { layers, act_last }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(Dense::n_out).unwrap_or(0)
    }

    fn activated(&self, l: usize) -> bool {
        l + 1 < self.layers.len() || self.act_last
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activated(l) {
                h.mapv_inplace(silu);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            let out = if self.activated(l) { z.mapv(silu) } else { z.clone() };
            cache.inputs.push(std::mem::replace(&mut h, out.clone()));
            cache.pre.push(z);
            cache.outputs.push(out);
        }
        (h, cache)
    }

    /// Accumulates gradients into `grads` and optionally returns the input gradient.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Array2<f64>,
        grads: &mut Mlp,
        want_input: bool,
    ) -> Option<Array2<f64>> {
        let mut g = grad_out.clone();
        for l in (0..self.layers.len()).rev() {
            if self.activated(l) {
                g.zip_mut_with(&cache.pre[l], |gi, &z| *gi *= silu_grad(z));
            }
            let need = l > 0 || want_input;
            match self.layers[l].backward(&cache.inputs[l], &g, &mut grads.layers[l], need) {
                Some(gi) => g = gi,
                None => return None,
            }
        }
        Some(g)
    }
}

impl Parameters for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, l) in self.layers.iter().enumerate() {
            visit_child(&i.to_string(), l, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_child_mut(&i.to_string(), l, f);
        }
    }
}
