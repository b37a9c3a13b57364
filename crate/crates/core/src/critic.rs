//! Multi-head critic over retained policy-encoder activations.
//!
//! Each retained layer is cut into tokens, projected to keys and values, and a
//! small set of learnable queries attends over all tokens. The pooled query
//! output feeds three heads: trajectory value, subtask value and the logit of
//! the interaction probability. The critic only ever sees copies of the
//! activations, so its gradients cannot reach the encoder.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Config, CriticConfig, ValueComposition};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, visit_child, visit_child_mut, Dense, Mlp, MlpCache, Parameters};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticOutput {
    pub v_traj: f64,
    pub v_sub: f64,
    pub p_int: f64,
}

/// Single value the advantage and the stagnation monitor work with.
pub fn composite_value(out: &CriticOutput, omega_traj: f64, omega_sub: f64, mode: ValueComposition) -> f64 {
    match mode {
        ValueComposition::Weighted => omega_traj * out.v_traj + omega_sub * out.v_sub,
        ValueComposition::TrajectoryOnly => out.v_traj,
    }
}

/// Clamp used only when showing a value to an operator or a plot.
pub fn display_value(v: f64) -> f64 {
    v.clamp(0.0, 1.05)
}

/// Per-sample regression and classification targets.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CriticTargets {
    pub y_traj: Vec<f64>,
    pub y_sub: Vec<f64>,
    pub y_int: Vec<f64>,
}

/// Batch means of the three loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CriticLoss {
    pub traj: f64,
    pub sub: f64,
    pub int: f64,
}

impl CriticLoss {
    pub fn total(&self) -> f64 {
        self.traj + self.sub + self.int
    }
}

/// `-y ln sigmoid(z) - (1 - y) ln(1 - sigmoid(z))`, computed from the logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Scaled dot-product attention of one query over `keys`/`values` rows with
/// optional additive score offsets. Reference implementation for tests and
/// the building block the batched forward mirrors.
pub fn attend(query: &[f64], keys: &Array2<f64>, values: &Array2<f64>, offsets: Option<&[f64]>) -> Vec<f64> {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let mut scores: Vec<f64> = keys
        .rows()
        .into_iter()
        .enumerate()
        .map(|(m, k)| k.iter().zip(query).map(|(a, b)| a * b).sum::<f64>() * scale + offsets.map_or(0.0, |o| o[m]))
        .collect();
    softmax_in_place(&mut scores);
    let mut out = vec![0.0; values.ncols()];
    for (m, row) in values.rows().into_iter().enumerate() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += scores[m] * v;
        }
    }
    out
}

fn softmax_in_place(x: &mut [f64]) {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    /// `n_queries x dim`
    pub queries: Array2<f64>,
    pub key_proj: Vec<Dense>,
    pub value_proj: Vec<Dense>,
    /// Learned per-token offsets added to the keys, `n_tokens x dim`.
    pub key_pos: Array2<f64>,
    pub out_proj: Dense,
    /// Trajectory value, subtask value, interaction logit.
    pub heads: Vec<Mlp>,
    pub n_heads: usize,
    pub tokens_per_layer: usize,
}

struct ForwardCache {
    tokens: Vec<Array2<f64>>,
    k: Array3<f64>,
    v: Array3<f64>,
    attn: Array4<f64>,
    o: Array2<f64>,
    pooled: Array2<f64>,
    head_caches: Vec<MlpCache>,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(cfg: &Config, rng: &mut R) -> Self {
        let layers = cfg.policy.retained().len();
        Self::with_sizes(&cfg.critic, layers, cfg.policy.encoder_width, rng)
    }

    pub fn with_sizes<R: Rng + ?Sized>(c: &CriticConfig, layers: usize, width: usize, rng: &mut R) -> Self {
        let tok = width / c.tokens_per_layer;
        let n_tokens = layers * c.tokens_per_layer;
        let mut normal = |scale: f64| {
            let z: f64 = rng.sample(StandardNormal);
            scale * z
        };
        let queries = Array2::from_shape_fn((c.n_queries, c.dim), |_| normal(0.5));
        let key_pos = Array2::from_shape_fn((n_tokens, c.dim), |_| normal(0.1));
        let key_proj = (0..layers).map(|_| Dense::new(tok, c.dim, rng)).collect();
        let value_proj = (0..layers).map(|_| Dense::new(tok, c.dim, rng)).collect();
        let out_proj = Dense::new(c.dim, c.dim, rng);
        let heads = (0..3).map(|_| Mlp::new(&[c.dim, c.head_hidden, 1], false, rng)).collect();
        Self {
            queries,
            key_proj,
            value_proj,
            key_pos,
            out_proj,
            heads,
            n_heads: c.heads,
            tokens_per_layer: c.tokens_per_layer,
        }
    }

    pub fn dim(&self) -> usize {
        self.queries.ncols()
    }

    fn check_input(&self, retained: &[Array2<f64>]) -> Result<usize> {
        if retained.len() != self.key_proj.len() {
            return Err(Error::Shape(format!(
                "critic expects {} retained layers, got {}",
                self.key_proj.len(),
                retained.len()
            )));
        }
        let b = retained[0].nrows();
        let want = self.key_proj[0].n_in() * self.tokens_per_layer;
        for r in retained {
            if r.nrows() != b || r.ncols() != want {
                return Err(Error::Shape(format!(
                    "retained activation is {}x{}, expected {b}x{want}",
                    r.nrows(),
                    r.ncols()
                )));
            }
        }
        Ok(b)
    }

    fn forward_cached(&self, retained: &[Array2<f64>]) -> Result<(Vec<Array2<f64>>, ForwardCache)> {
        let b = self.check_input(retained)?;
        let (p, d, h) = (self.tokens_per_layer, self.dim(), self.n_heads);
        let dh = d / h;
        let nq = self.queries.nrows();
        let m = retained.len() * p;
        let mut k = Array3::zeros((b, m, d));
        let mut v = Array3::zeros((b, m, d));
        let mut tokens = Vec::with_capacity(retained.len());
        for (l, r) in retained.iter().enumerate() {
            let s = self.key_proj[l].n_in();
            let t = r
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order((b * p, s))
                .map_err(|e| Error::Shape(e.to_string()))?;
            let kl = self.key_proj[l].forward(&t);
            let vl = self.value_proj[l].forward(&t);
            for bi in 0..b {
                for j in 0..p {
                    let mi = l * p + j;
                    let mut krow = k.slice_mut(s![bi, mi, ..]);
                    krow.assign(&kl.row(bi * p + j));
                    krow += &self.key_pos.row(mi);
                    v.slice_mut(s![bi, mi, ..]).assign(&vl.row(bi * p + j));
                }
            }
            tokens.push(t);
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn = Array4::zeros((b, h, nq, m));
        let mut o = Array2::zeros((b * nq, d));
        let mut scores = vec![0.0; m];
        for bi in 0..b {
            for hh in 0..h {
                let cols = hh * dh..(hh + 1) * dh;
                for q in 0..nq {
                    for (mi, sc) in scores.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for c in cols.clone() {
                            acc += self.queries[[q, c]] * k[[bi, mi, c]];
                        }
                        *sc = acc * scale;
                    }
                    softmax_in_place(&mut scores);
                    for (mi, &a) in scores.iter().enumerate() {
                        attn[[bi, hh, q, mi]] = a;
                        for c in cols.clone() {
                            o[[bi * nq + q, c]] += a * v[[bi, mi, c]];
                        }
                    }
                }
            }
        }
        let proj = self.out_proj.forward(&o);
        let mut pooled = Array2::zeros((b, d));
        for bi in 0..b {
            let mut row = pooled.row_mut(bi);
            for q in 0..nq {
                row += &proj.row(bi * nq + q);
                row += &self.queries.row(q);
            }
            row /= nq as f64;
        }
        let mut outs = Vec::with_capacity(3);
        let mut head_caches = Vec::with_capacity(3);
        for head in &self.heads {
            let (y, c) = head.forward_cached(&pooled);
            outs.push(y);
            head_caches.push(c);
        }
        Ok((
            outs,
            ForwardCache {
                tokens,
                k,
                v,
                attn,
                o,
                pooled,
                head_caches,
            },
        ))
    }

    /// Raw head outputs, one row per sample: `(v_traj, v_sub, logit)`.
    pub fn forward_raw(&self, retained: &[Array2<f64>]) -> Result<Vec<[f64; 3]>> {
        let (outs, _) = self.forward_cached(retained)?;
        Ok((0..outs[0].nrows())
            .map(|i| [outs[0][[i, 0]], outs[1][[i, 0]], outs[2][[i, 0]]])
            .collect())
    }

    pub fn forward(&self, retained: &[Array2<f64>]) -> Result<Vec<CriticOutput>> {
        Ok(self
            .forward_raw(retained)?
            .into_iter()
            .map(|[a, b, z]| CriticOutput {
                v_traj: a,
                v_sub: b,
                p_int: sigmoid(z),
            })
            .collect())
    }

    /// Mean MSE on both value heads plus mean BCE on the interaction head;
    /// the gradient of their sum is accumulated into `grads`.
    pub fn loss_grad(&self, retained: &[Array2<f64>], y: &CriticTargets, grads: &mut Critic) -> Result<CriticLoss> {
        let (outs, cache) = self.forward_cached(retained)?;
        let b = outs[0].nrows();
        if y.y_traj.len() != b || y.y_sub.len() != b || y.y_int.len() != b {
            return Err(Error::Shape("critic targets do not match the batch".into()));
        }
        if y.y_int.iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::Usage("interaction targets must be 0 or 1".into()));
        }
        let inv = 1.0 / b as f64;
        let mut loss = CriticLoss::default();
        let mut g_heads = vec![Array2::zeros((b, 1)); 3];
        for i in 0..b {
            let (vt, vs, z) = (outs[0][[i, 0]], outs[1][[i, 0]], outs[2][[i, 0]]);
            loss.traj += (vt - y.y_traj[i]).powi(2) * inv;
            loss.sub += (vs - y.y_sub[i]).powi(2) * inv;
            loss.int += bce_with_logit(z, y.y_int[i]) * inv;
            g_heads[0][[i, 0]] = 2.0 * (vt - y.y_traj[i]) * inv;
            g_heads[1][[i, 0]] = 2.0 * (vs - y.y_sub[i]) * inv;
            g_heads[2][[i, 0]] = (sigmoid(z) - y.y_int[i]) * inv;
        }
        if !loss.total().is_finite() {
            return Err(Error::NonFinite("critic loss".into()));
        }
        self.backward(&cache, &g_heads, grads);
        Ok(loss)
    }

    /// Loss without gradients.
    pub fn loss(&self, retained: &[Array2<f64>], y: &CriticTargets) -> Result<CriticLoss> {
        let raw = self.forward_raw(retained)?;
        let inv = 1.0 / raw.len().max(1) as f64;
        let mut loss = CriticLoss::default();
        for (i, [vt, vs, z]) in raw.into_iter().enumerate() {
            loss.traj += (vt - y.y_traj[i]).powi(2) * inv;
            loss.sub += (vs - y.y_sub[i]).powi(2) * inv;
            loss.int += bce_with_logit(z, y.y_int[i]) * inv;
        }
        Ok(loss)
    }

    fn backward(&self, cache: &ForwardCache, g_heads: &[Array2<f64>], grads: &mut Critic) {
        let b = cache.pooled.nrows();
        let (p, d, h) = (self.tokens_per_layer, self.dim(), self.n_heads);
        let dh = d / h;
        let nq = self.queries.nrows();
        let m = cache.k.shape()[1];
        let mut g_pooled = Array2::zeros((b, d));
        for (j, head) in self.heads.iter().enumerate() {
            let g = head
                .backward(&cache.head_caches[j], &g_heads[j], &mut grads.heads[j], true)
                .expect("input gradient requested");
            g_pooled += &g;
        }
        // pooled = mean_q (query_q + out_proj(o_q))
        let mut g_proj = Array2::zeros((b * nq, d));
        for bi in 0..b {
            let gp = g_pooled.row(bi).mapv(|x| x / nq as f64);
            for q in 0..nq {
                g_proj.row_mut(bi * nq + q).assign(&gp);
                let mut gq = grads.queries.row_mut(q);
                gq += &gp;
            }
        }
        let g_o = self
            .out_proj
            .backward(&cache.o, &g_proj, &mut grads.out_proj, true)
            .expect("input gradient requested");

        let scale = 1.0 / (dh as f64).sqrt();
        let mut g_k = Array3::<f64>::zeros((b, m, d));
        let mut g_v = Array3::<f64>::zeros((b, m, d));
        let mut g_a = vec![0.0; m];
        for bi in 0..b {
            for hh in 0..h {
                let cols = hh * dh..(hh + 1) * dh;
                for q in 0..nq {
                    let go = g_o.row(bi * nq + q);
                    for (mi, ga) in g_a.iter_mut().enumerate() {
                        let a = cache.attn[[bi, hh, q, mi]];
                        let mut dot = 0.0;
                        for c in cols.clone() {
                            dot += go[c] * cache.v[[bi, mi, c]];
                            g_v[[bi, mi, c]] += a * go[c];
                        }
                        *ga = dot;
                    }
                    let mean: f64 = (0..m).map(|mi| cache.attn[[bi, hh, q, mi]] * g_a[mi]).sum();
                    for mi in 0..m {
                        let gs = cache.attn[[bi, hh, q, mi]] * (g_a[mi] - mean) * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        for c in cols.clone() {
                            grads.queries[[q, c]] += gs * cache.k[[bi, mi, c]];
                            g_k[[bi, mi, c]] += gs * self.queries[[q, c]];
                        }
                    }
                }
            }
        }
        grads.key_pos += &g_k.sum_axis(Axis(0));
        for (l, t) in cache.tokens.iter().enumerate() {
            let mut gkl = Array2::zeros((b * p, d));
            let mut gvl = Array2::zeros((b * p, d));
            for bi in 0..b {
                for j in 0..p {
                    gkl.row_mut(bi * p + j).assign(&g_k.slice(s![bi, l * p + j, ..]));
                    gvl.row_mut(bi * p + j).assign(&g_v.slice(s![bi, l * p + j, ..]));
                }
            }
            self.key_proj[l].backward(t, &gkl, &mut grads.key_proj[l], false);
            self.value_proj[l].backward(t, &gvl, &mut grads.value_proj[l], false);
        }
    }
}

fn visit_array(name: &str, a: &Array2<f64>, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
    f(name, a.shape(), a.as_slice().expect("standard layout"));
}

impl Parameters for Critic {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_array("queries", &self.queries, f);
        for (l, d) in self.key_proj.iter().enumerate() {
            visit_child(&format!("key.{l}"), d, f);
        }
        for (l, d) in self.value_proj.iter().enumerate() {
            visit_child(&format!("value.{l}"), d, f);
        }
        visit_array("key_pos", &self.key_pos, f);
        visit_child("out", &self.out_proj, f);
        for (j, h) in self.heads.iter().enumerate() {
            visit_child(&format!("head.{j}"), h, f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("queries", self.queries.as_slice_mut().expect("standard layout"));
        for (l, d) in self.key_proj.iter_mut().enumerate() {
            visit_child_mut(&format!("key.{l}"), d, f);
        }
        for (l, d) in self.value_proj.iter_mut().enumerate() {
            visit_child_mut(&format!("value.{l}"), d, f);
        }
        f("key_pos", self.key_pos.as_slice_mut().expect("standard layout"));
        visit_child_mut("out", &mut self.out_proj, f);
        for (j, h) in self.heads.iter_mut().enumerate() {
            visit_child_mut(&format!("head.{j}"), h, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{fill, n_params, set_flat, to_flat, zeros_like};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Critic {
        let c = CriticConfig {
            n_queries: 2,
            dim: 4,
            heads: 2,
            head_hidden: 3,
            tokens_per_layer: 2,
            composition: ValueComposition::Weighted,
        };
        Critic::with_sizes(&c, 2, 6, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn inputs(rng: &mut ChaCha8Rng, b: usize) -> Vec<Array2<f64>> {
        (0..2)
            .map(|_| Array2::from_shape_fn((b, 6), |_| rng.random_range(-1.0..1.5)))
            .collect()
    }

    #[test]
    fn bce_closed_form() {
        assert!((bce_with_logit(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logit(40.0, 1.0) < 1e-15);
        assert!(bce_with_logit(-40.0, 0.0) < 1e-15);
        assert!((bce_with_logit(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn zeroed_critic_reports_the_head_bias() {
        let mut c = tiny(0);
        fill(&mut c, 0.0);
        c.heads[2].layers[1].b[0] = 0.7;
        let out = c.forward(&inputs(&mut ChaCha8Rng::seed_from_u64(1), 3)).unwrap();
        for o in out {
            assert_eq!(o.p_int, sigmoid(0.7));
            assert_eq!((o.v_traj, o.v_sub), (0.0, 0.0));
        }
    }

    #[test]
    fn duplicated_tokens_act_as_log_two_score_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let vals = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let q: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Repeat tokens 1 and 2.
        let dup = |m: &Array2<f64>| m.select(Axis(0), &[0, 1, 2, 3, 1, 2]);
        let with_dups = attend(&q, &dup(&keys), &dup(&vals), None);
        let ln2 = std::f64::consts::LN_2;
        let reweighted = attend(&q, &keys, &vals, Some(&[0.0, ln2, ln2, 0.0]));
        for (a, b) in with_dups.iter().zip(&reweighted) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_attention_matches_the_reference() {
        // One head, one query: the pooled vector is query + out_proj(attend(..)).
        let c = CriticConfig {
            n_queries: 1,
            dim: 4,
            heads: 1,
            head_hidden: 3,
            tokens_per_layer: 2,
            composition: ValueComposition::Weighted,
        };
        let critic = Critic::with_sizes(&c, 2, 6, &mut ChaCha8Rng::seed_from_u64(8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = inputs(&mut rng, 1);
        let (_, cache) = critic.forward_cached(&x).unwrap();
        let mut keys = Array2::zeros((4, 4));
        let mut vals = Array2::zeros((4, 4));
        for l in 0..2 {
            for j in 0..2 {
                let tok = x[l].slice(s![0, j * 3..(j + 1) * 3]).to_owned().insert_axis(Axis(0));
                let row = l * 2 + j;
                keys.row_mut(row).assign(&(critic.key_proj[l].forward(&tok).row(0).to_owned() + critic.key_pos.row(row)));
                vals.row_mut(row).assign(&critic.value_proj[l].forward(&tok).row(0));
            }
        }
        let q = critic.queries.row(0).to_vec();
        let o = attend(&q, &keys, &vals, None);
        let o = Array2::from_shape_vec((1, 4), o).unwrap();
        let want = critic.out_proj.forward(&o).row(0).to_owned() + critic.queries.row(0);
        for (a, b) in want.iter().zip(cache.pooled.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let c = tiny(seed);
            assert!(n_params(&c) <= 500);
            let mut rng = ChaCha8Rng::seed_from_u64(50 + seed);
            let x = inputs(&mut rng, 4);
            let y = CriticTargets {
                y_traj: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
                y_sub: (0..4).map(|_| rng.random_range(0.0..1.0)).collect(),
                y_int: vec![0.0, 1.0, 1.0, 0.0],
            };
            let mut g = zeros_like(&c);
            c.loss_grad(&x, &y, &mut g).unwrap();
            let analytic = to_flat(&g);
            let base = to_flat(&c);
            let mut probe = c.clone();
            let h = 1e-5;
            for i in 0..base.len() {
                let mut q = base.clone();
                q[i] += h;
                set_flat(&mut probe, &q).unwrap();
                let up = probe.loss(&x, &y).unwrap().total();
                q[i] -= 2.0 * h;
                set_flat(&mut probe, &q).unwrap();
                let dn = probe.loss(&x, &y).unwrap().total();
                let fd = (up - dn) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-7);
                assert!(err < 1e-4, "seed {seed} param {i}: fd {fd} analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn targets_are_validated() {
        let c = tiny(1);
        let x = inputs(&mut ChaCha8Rng::seed_from_u64(2), 2);
        let mut g = zeros_like(&c);
        let y = CriticTargets {
            y_traj: vec![0.0; 2],
            y_sub: vec![0.0; 2],
            y_int: vec![0.5, 1.0],
        };
        assert!(matches!(c.loss_grad(&x, &y, &mut g), Err(Error::Usage(_))));
        assert!(c.forward(&x[..1]).is_err());
    }

    #[test]
    fn composite_weights_the_value_heads() {
        let o = CriticOutput {
            v_traj: 1.0,
            v_sub: 1.0,
            p_int: 0.5,
        };
        assert_eq!(composite_value(&o, 0.4, 0.6, ValueComposition::Weighted), 1.0);
        let o = CriticOutput { v_sub: 0.0, ..o };
        assert!((composite_value(&o, 0.4, 0.6, ValueComposition::Weighted) - 0.4).abs() < 1e-15);
        assert_eq!(composite_value(&o, 0.4, 0.6, ValueComposition::TrajectoryOnly), 1.0);
        assert_eq!(display_value(1.3), 1.05);
        assert_eq!(display_value(-0.2), 0.0);
    }
}
