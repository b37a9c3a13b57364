//! Flow-matching action policy.
//!
//! An MLP encoder maps the observation to a feature vector; a velocity MLP
//! maps `(tau, noisy chunk, feature)` to a velocity in chunk space. Actions
//! are drawn by Euler-integrating that field from Gaussian noise whose scale
//! shrinks as the predicted interaction probability grows.

use ndarray::{s, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Config, PolicyConfig};
use crate::error::{Error, Result};
use crate::nn::{visit_child, visit_child_mut, Mlp, Parameters};
use crate::sim::{Color, Image, Observation, ACTION_DIM};

/// `sigma_base * (1 - alpha * p) + sigma_min`.
pub fn temperature(p_int: f64, sigma_base: f64, alpha: f64, sigma_min: f64) -> f64 {
    sigma_base * (1.0 - alpha * p_int) + sigma_min
}

pub fn temperature_for(p_int: f64, cfg: &PolicyConfig) -> f64 {
    temperature(
        p_int,
        cfg.exploration_sigma_base,
        cfg.exploration_modulation_alpha,
        cfg.exploration_sigma_min,
    )
}

/// Point on the straight path from noise to action, and its constant velocity.
pub fn flow_interpolate(a: &[f64], eps: &[f64], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != eps.len() {
        return Err(Error::Shape(format!("chunk has {} entries, noise {}", a.len(), eps.len())));
    }
    let hat = a.iter().zip(eps).map(|(a, e)| (1.0 - tau) * e + tau * a).collect();
    let u = a.iter().zip(eps).map(|(a, e)| a - e).collect();
    Ok((hat, u))
}

/// How an observation is flattened into the encoder input: pooled pixels,
/// proprioception, one-hot subtask index and one-hot task id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub image_size: usize,
    pub pool: usize,
    pub keypoints: bool,
    /// One-hot slots for subtask indices `0..=max_subtasks`.
    pub max_subtasks: usize,
    pub n_tasks: usize,
}

impl FeatureLayout {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            image_size: cfg.sim.image_size,
            pool: cfg.policy.image_pool,
            keypoints: cfg.policy.color_keypoints,
            max_subtasks: cfg.max_subtasks(),
            n_tasks: cfg.n_tasks(),
        }
    }

    fn pooled_len(&self) -> usize {
        let side = self.image_size / self.pool;
        side * side * 3
    }

    fn keypoint_len(&self) -> usize {
        if self.keypoints {
            3 * Color::ALL.len()
        } else {
            0
        }
    }

    pub fn dim(&self) -> usize {
        self.pooled_len() + self.keypoint_len() + 3 + self.max_subtasks + 1 + self.n_tasks
    }

    pub fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        if obs.image.width != self.image_size || obs.image.height != self.image_size {
            return Err(Error::Shape(format!(
                "observation is {}x{}, encoder expects {}",
                obs.image.width, obs.image.height, self.image_size
            )));
        }
        if obs.subtask_index > self.max_subtasks || obs.task_id >= self.n_tasks {
            return Err(Error::Shape(format!(
                "subtask {} / task {} outside the encoder's one-hot range",
                obs.subtask_index, obs.task_id
            )));
        }
        let mut x = obs.image.pooled(self.pool);
        if self.keypoints {
            x.extend(color_keypoints(&obs.image, [obs.proprio[0], obs.proprio[1]]));
        }
        x.extend_from_slice(&obs.proprio);
        let mut sub = vec![0.0; self.max_subtasks + 1];
        sub[obs.subtask_index] = 1.0;
        x.extend(sub);
        let mut task = vec![0.0; self.n_tasks];
        task[obs.task_id] = 1.0;
        x.extend(task);
        Ok(x)
    }
}

/// Scale applied to keypoint offsets (fractions of the frame) so that
/// typical values are of order one.
const KEYPOINT_GAIN: f64 = 4.0;

/// For each palette colour: whether any pixel has exactly that colour, and
/// the offset of those pixels' centroid from `gripper` (both in fractions of
/// the frame side, scaled by [`KEYPOINT_GAIN`]). A fixed pixel-space front end
/// that stands in for a pretrained object detector.
pub fn color_keypoints(image: &Image, gripper: [f64; 2]) -> Vec<f64> {
    let mut acc = [[0.0f64; 3]; Color::ALL.len()];
    let rgb: Vec<[u8; 3]> = Color::ALL.iter().map(|c| c.rgb()).collect();
    let (w, h) = (image.width, image.height);
    for v in 0..h {
        for u in 0..w {
            let i = (v * w + u) * image.channels;
            let px = &image.data[i..i + 3];
            if let Some(k) = rgb.iter().position(|c| c[..] == *px) {
                acc[k][0] += 1.0;
                acc[k][1] += (u as f64 + 0.5) / w as f64;
                acc[k][2] += (v as f64 + 0.5) / h as f64;
            }
        }
    }
    let mut out = Vec::with_capacity(3 * acc.len());
    for [n, su, sv] in acc {
        if n > 0.0 {
            out.extend([1.0, KEYPOINT_GAIN * (su / n - gripper[0]), KEYPOINT_GAIN * (sv / n - gripper[1])]);
        } else {
            out.extend([0.0, 0.0, 0.0]);
        }
    }
    out
}

/// Encoder output: the feature fed to the velocity net plus the retained
/// layer activations offered to the critic (copies, so nothing downstream can
/// reach back into the encoder).
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub feature: Array2<f64>,
    pub retained: Vec<Array2<f64>>,
}

impl Encoded {
    /// Retained activations side by side, one row per sample.
    pub fn retained_concat(&self) -> Array2<f64> {
        let views: Vec<_> = self.retained.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(1), &views).expect("equal batch sizes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub encoder: Mlp,
    pub velocity: Mlp,
    pub chunk: usize,
    pub time_embed_dim: usize,
    pub retained_layers: Vec<usize>,
}

impl Policy {
    pub fn new<R: Rng + ?Sized>(cfg: &Config, rng: &mut R) -> Self {
        let p = &cfg.policy;
        let input = FeatureLayout::from_config(cfg).dim();
        Self::with_sizes(
            input,
            p.encoder_width,
            p.encoder_layers,
            p.velocity_width,
            p.velocity_layers,
            p.time_embed_dim,
            cfg.sim.action_chunk,
            p.retained(),
            rng,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_sizes<R: Rng + ?Sized>(
        input: usize,
        enc_width: usize,
        enc_layers: usize,
        vel_width: usize,
        vel_layers: usize,
        time_embed_dim: usize,
        chunk: usize,
        retained_layers: Vec<usize>,
        rng: &mut R,
    ) -> Self {
        let mut enc_sizes = vec![input];
        enc_sizes.extend(std::iter::repeat_n(enc_width, enc_layers));
        let encoder = Mlp::new(&enc_sizes, true, rng);
        let act = chunk * ACTION_DIM;
        let mut vel_sizes = vec![time_embed_dim + act + enc_width];
        vel_sizes.extend(std::iter::repeat_n(vel_width, vel_layers - 1));
        vel_sizes.push(act);
        let velocity = Mlp::new(&vel_sizes, false, rng);
        Self {
            encoder,
            velocity,
            chunk,
            time_embed_dim,
            retained_layers,
        }
    }

    pub fn action_len(&self) -> usize {
        self.chunk * ACTION_DIM
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.n_out()
    }

    pub fn encode(&self, x: &Array2<f64>) -> Encoded {
        let (feature, cache) = self.encoder.forward_cached(x);
        let retained = self
            .retained_layers
            .iter()
            .map(|&l| cache.outputs[l].clone())
            .collect();
        Encoded { feature, retained }
    }

    /// Sinusoidal embedding of `tau` at log-spaced frequencies in `[1, 100]`.
    pub fn time_embedding(&self, tau: f64, out: &mut [f64]) {
        let half = self.time_embed_dim / 2;
        for k in 0..half {
            let f = if half > 1 {
                (100f64.ln() * k as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            };
            out[k] = (f * tau).sin();
            out[half + k] = (f * tau).cos();
        }
    }

    fn velocity_input(&self, tau: &[f64], a_hat: &Array2<f64>, feature: &Array2<f64>) -> Array2<f64> {
        let b = tau.len();
        let (te, al) = (self.time_embed_dim, self.action_len());
        let mut vin = Array2::zeros((b, te + al + feature.ncols()));
        for i in 0..b {
            let mut row = vin.row_mut(i);
            let r = row.as_slice_mut().expect("standard layout");
            self.time_embedding(tau[i], &mut r[..te]);
        }
        vin.slice_mut(s![.., te..te + al]).assign(a_hat);
        vin.slice_mut(s![.., te + al..]).assign(feature);
        vin
    }

    pub fn velocity(&self, tau: &[f64], a_hat: &Array2<f64>, feature: &Array2<f64>) -> Array2<f64> {
        self.velocity.forward(&self.velocity_input(tau, a_hat, feature))
    }

    /// Weighted flow-matching loss on a batch, accumulating its gradient into
    /// `grads`. Per sample the squared error is averaged over chunk entries;
    /// the batch loss is the mean of `weight * error`. With `weights = None`
    /// every sample counts once.
    pub fn fm_loss_grad(
        &self,
        x: &Array2<f64>,
        a: &Array2<f64>,
        eps: &Array2<f64>,
        tau: &[f64],
        weights: Option<&[f64]>,
        grads: &mut Policy,
    ) -> Result<f64> {
        let b = x.nrows();
        let al = self.action_len();
        if a.dim() != (b, al) || eps.dim() != (b, al) || tau.len() != b || weights.is_some_and(|w| w.len() != b) {
            return Err(Error::Shape("flow-matching batch has inconsistent shapes".into()));
        }
        let (feature, enc_cache) = self.encoder.forward_cached(x);
        let a_hat = interpolate_batch(a, eps, tau);
        let u = a - eps;
        let vin = self.velocity_input(tau, &a_hat, &feature);
        let (v, vel_cache) = self.velocity.forward_cached(&vin);
        let mut diff = v - &u;
        let norm = 1.0 / (b * al) as f64;
        let mut loss = 0.0;
        for (i, mut row) in diff.rows_mut().into_iter().enumerate() {
            let sq: f64 = row.iter().map(|d| d * d).sum();
            let (l, g) = match weights {
                Some(w) => (w[i] * sq, 2.0 * w[i] * norm),
                None => (sq, 2.0 * norm),
            };
            loss += l;
            row.mapv_inplace(|d| d * g);
        }
        loss *= norm;
        if !loss.is_finite() {
            return Err(Error::NonFinite("flow-matching loss".into()));
        }
        let g_vin = self
            .velocity
            .backward(&vel_cache, &diff, &mut grads.velocity, true)
            .expect("input gradient requested");
        let te_al = self.time_embed_dim + al;
        let g_feat = g_vin.slice(s![.., te_al..]).to_owned();
        self.encoder.backward(&enc_cache, &g_feat, &mut grads.encoder, false);
        Ok(loss)
    }

    /// Forward-only version of [`Policy::fm_loss_grad`] without weights.
    pub fn fm_loss(&self, x: &Array2<f64>, a: &Array2<f64>, eps: &Array2<f64>, tau: &[f64]) -> f64 {
        let feature = self.encoder.forward(x);
        let v = self.velocity(tau, &interpolate_batch(a, eps, tau), &feature);
        let d = v - (a - eps);
        d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64
    }

    /// Draws one action chunk (flattened row-major `chunk x ACTION_DIM`) for
    /// the encoded observation `x`, with initial noise of standard deviation
    /// `temperature`.
    pub fn sample<R: Rng + ?Sized>(&self, x: ArrayView1<f64>, temperature: f64, n_steps: usize, rng: &mut R) -> Result<Vec<f64>> {
        let xb = x.to_owned().insert_axis(ndarray::Axis(0));
        let feature = self.encoder.forward(&xb);
        self.sample_from_feature(&feature, temperature, n_steps, rng)
    }

    pub fn sample_from_feature<R: Rng + ?Sized>(
        &self,
        feature: &Array2<f64>,
        temperature: f64,
        n_steps: usize,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if n_steps == 0 {
            return Err(Error::Usage("sampling needs at least one ODE step".into()));
        }
        let al = self.action_len();
        let mut a = Array2::from_shape_fn((1, al), |_| {
            let z: f64 = rng.sample(StandardNormal);
            temperature * z
        });
        let dt = 1.0 / n_steps as f64;
        for k in 0..n_steps {
            let v = self.velocity(&[k as f64 * dt], &a, feature);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("velocity during sampling".into()));
            }
            a.scaled_add(dt, &v);
        }
        Ok(a.iter().map(|x| x.clamp(-1.0, 1.0)).collect())
    }
}

pub fn interpolate_batch(a: &Array2<f64>, eps: &Array2<f64>, tau: &[f64]) -> Array2<f64> {
    let mut out = eps.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let t = tau[i];
        row.zip_mut_with(&a.row(i), |e, &x| *e = (1.0 - t) * *e + t * x);
    }
    out
}

impl Parameters for Policy {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("encoder", &self.encoder, f);
        visit_child("velocity", &self.velocity, f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("encoder", &mut self.encoder, f);
        visit_child_mut("velocity", &mut self.velocity, f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{n_params, set_flat, to_flat, zeros_like};
    use crate::sim::{Env, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // 6 -> 8 -> 8 encoder, (4 + 6 + 8) -> 6 -> 6 velocity, chunk of 2.
        Policy::with_sizes(6, 8, 2, 6, 2, 4, 2, vec![0, 1], &mut rng)
    }

    fn batch(rng: &mut ChaCha8Rng, b: usize, p: &Policy) -> (Array2<f64>, Array2<f64>, Array2<f64>, Vec<f64>) {
        let x = Array2::from_shape_fn((b, p.encoder.n_in()), |_| rng.random_range(-1.0..1.0));
        let a = Array2::from_shape_fn((b, p.action_len()), |_| rng.random_range(-1.0..1.0));
        let e = Array2::from_shape_fn((b, p.action_len()), |_| rng.sample(StandardNormal));
        let t = (0..b).map(|_| rng.random_range(0.0..1.0)).collect();
        (x, a, e, t)
    }

    #[test]
    fn temperature_values() {
        assert!((temperature(0.0, 1.5, 0.9, 0.2) - 1.7).abs() < 1e-12);
        assert!((temperature(1.0, 1.5, 0.9, 0.2) - 0.35).abs() < 1e-12);
        for p in [0.0, 0.3, 1.0] {
            assert!((temperature(p, 1.5, 0.0, 0.2) - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_endpoints() {
        let a = [0.5, -0.25, 1.0];
        let e = [0.1, 0.2, -0.3];
        assert_eq!(flow_interpolate(&a, &e, 0.0).unwrap().0, e.to_vec());
        assert_eq!(flow_interpolate(&a, &e, 1.0).unwrap().0, a.to_vec());
        let (_, u) = flow_interpolate(&a, &e, 0.3).unwrap();
        let one_step: Vec<f64> = e.iter().zip(&u).map(|(e, u)| e + u).collect();
        assert_eq!(one_step, a.to_vec());
        assert!(flow_interpolate(&a, &e[..2], 0.5).is_err());
    }

    #[test]
    fn fm_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let p = toy(seed);
            assert!(n_params(&p) <= 500);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (x, a, e, t) = batch(&mut rng, 5, &p);
            let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..3.0)).collect();
            let mut g = zeros_like(&p);
            p.fm_loss_grad(&x, &a, &e, &t, Some(&w), &mut g).unwrap();
            let analytic = to_flat(&g);
            let base = to_flat(&p);
            let mut probe = p.clone();
            let h = 1e-5;
            let mut scratch = zeros_like(&p);
            let mut eval = |params: &[f64]| {
                set_flat(&mut probe, params).unwrap();
                probe.fm_loss_grad(&x, &a, &e, &t, Some(&w), &mut scratch).unwrap()
            };
            for i in 0..base.len() {
                let mut q = base.clone();
                q[i] += h;
                let up = eval(&q);
                q[i] -= 2.0 * h;
                let dn = eval(&q);
                let fd = (up - dn) / (2.0 * h);
                let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-7);
                assert!(err < 1e-4, "seed {seed} param {i}: fd {fd} analytic {}", analytic[i]);
            }
        }
    }

    #[test]
    fn fm_loss_is_batch_order_invariant_and_matches_grad_path() {
        let p = toy(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, a, e, t) = batch(&mut rng, 6, &p);
        let l = p.fm_loss(&x, &a, &e, &t);
        let mut g = zeros_like(&p);
        let l2 = p.fm_loss_grad(&x, &a, &e, &t, None, &mut g).unwrap();
        assert!((l - l2).abs() < 1e-12);
        let perm = [3, 1, 5, 0, 2, 4];
        let pick = |m: &Array2<f64>| m.select(ndarray::Axis(0), &perm);
        let tp: Vec<f64> = perm.iter().map(|&i| t[i]).collect();
        assert!((p.fm_loss(&pick(&x), &pick(&a), &pick(&e), &tp) - l).abs() < 1e-12);
    }

    #[test]
    fn zero_temperature_sampling_ignores_the_rng() {
        let p = toy(1);
        let x = ndarray::Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0, 0.5, 0.9]);
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(
            p.sample(x.view(), 0.0, 10, &mut r1).unwrap(),
            p.sample(x.view(), 0.0, 10, &mut r2).unwrap()
        );
        let mut r3 = ChaCha8Rng::seed_from_u64(7);
        let mut r4 = ChaCha8Rng::seed_from_u64(7);
        let s3 = p.sample(x.view(), 1.0, 10, &mut r3).unwrap();
        assert_eq!(s3, p.sample(x.view(), 1.0, 10, &mut r4).unwrap());
        assert!(s3.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn initial_noise_scale_follows_the_temperature() {
        // With zero weights the velocity field is identically zero, so the
        // sample equals the initial noise (before clamping; the tails beyond
        // +-1 are rare at this scale).
        let mut p = toy(2);
        crate::nn::fill(&mut p.velocity, 0.0);
        let x = ndarray::Array1::zeros(6);
        let t = temperature(1.0, 1.5, 0.9, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut draws = Vec::new();
        for _ in 0..(10_000 / p.action_len() + 1) {
            draws.extend(p.sample(x.view(), t, 1, &mut rng).unwrap());
        }
        draws.truncate(10_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        assert!((var.sqrt() - 0.35).abs() / 0.35 < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn exact_field_recovers_the_action() {
        // If the velocity equals a - eps everywhere, Euler lands on a exactly
        // for any number of steps.
        let a = [0.3, -0.7, 0.1];
        let e = [1.2, 0.4, -0.9];
        for n in [1, 3, 10, 37] {
            let mut x = e.to_vec();
            let dt = 1.0 / n as f64;
            for _ in 0..n {
                for j in 0..3 {
                    x[j] += dt * (a[j] - e[j]);
                }
            }
            for j in 0..3 {
                assert!((x[j] - a[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn retained_layers_default_to_the_last_three() {
        let cfg = Config::default();
        let p = Policy::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.retained_layers, vec![0, 1, 2]);
        let env = Env::new(TaskSpec::blockstack4(), cfg.sim.clone()).unwrap();
        let (_, obs, _) = env.reset(0);
        let layout = FeatureLayout::from_config(&cfg);
        let x = Array2::from_shape_vec((1, layout.dim()), layout.encode(&obs).unwrap()).unwrap();
        let enc = p.encode(&x);
        let (_, cache) = p.encoder.forward_cached(&x);
        for (k, &l) in p.retained_layers.iter().enumerate() {
            assert_eq!(enc.retained[k], cache.outputs[l]);
        }
        assert_eq!(enc.retained_concat().ncols(), 3 * cfg.policy.encoder_width);
        assert_eq!(p.encode(&x), enc);
    }
}
