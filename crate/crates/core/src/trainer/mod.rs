//! Actor and critic optimisation: supervised warm-up, offline
//! advantage-weighted regression, and the hybrid updates used during
//! interactive refinement.

mod advantage;
mod data;
mod stages;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use advantage::{awr_weight, dataset_advantages, dataset_values, mean_std, n_step_advantage};
pub use data::{hybrid_rows, uniform_rows, Batch, Dataset, EpisodeSpan, Source};
pub use stages::{run_hybrid_updates, run_stage_i, run_stage_ii, AdvantageTables};

use crate::config::Config;
use crate::critic::{Critic, CriticLoss};
use crate::error::{Error, Result};
use crate::nn::{all_finite, clip_global_norm, zeros_like, AdamW, CosineSchedule, Ema};
use crate::policy::{FeatureLayout, Policy};

/// Training stage a metrics row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sft,
    Offline,
    Hitl,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sft => "sft",
            Stage::Offline => "offline",
            Stage::Hitl => "hitl",
        }
    }
}

/// One row of the training log. Critic columns are NaN on steps without a
/// critic update and advantage columns are NaN during supervised warm-up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub stage: Stage,
    pub actor_step: usize,
    pub lr_actor: f64,
    pub actor_loss: f64,
    pub grad_norm: f64,
    pub critic: Option<CriticLoss>,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub weight_mean: f64,
}

pub const METRICS_HEADER: &str =
    "stage,actor_step,lr_actor,actor_loss,grad_norm,critic_traj,critic_sub,critic_int,adv_mean,adv_std,weight_mean";

impl MetricRow {
    pub fn csv(&self) -> String {
        let c = self.critic.unwrap_or(CriticLoss {
            traj: f64::NAN,
            sub: f64::NAN,
            int: f64::NAN,
        });
        format!(
            "{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            self.stage.as_str(),
            self.actor_step,
            self.lr_actor,
            self.actor_loss,
            self.grad_norm,
            c.traj,
            c.sub,
            c.int,
            self.adv_mean,
            self.adv_std,
            self.weight_mean
        )
    }
}

/// Renders metric rows as CSV with a header line.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Actor and critic streams of `seed`.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut actor = ChaCha8Rng::seed_from_u64(seed);
    actor.set_stream(1);
    let mut critic = ChaCha8Rng::seed_from_u64(seed);
    critic.set_stream(2);
    (actor, critic)
}

/// Networks, their EMA shadows, optimiser state and random streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: Config,
    pub layout: FeatureLayout,
    pub policy: Policy,
    pub policy_ema: Policy,
    pub critic: Critic,
    pub critic_ema: Critic,
    pub actor_opt: AdamW,
    pub critic_opt: AdamW,
    /// Actor steps taken across all stages.
    pub actor_steps: usize,
    /// Critic steps taken across all stages.
    pub critic_steps: usize,
    /// Batch sampling and flow noise for actor updates.
    pub rng_actor: ChaCha8Rng,
    /// Batch sampling for critic updates.
    pub rng_critic: ChaCha8Rng,
    pub metrics: Vec<MetricRow>,
}

impl Trainer {
    /// Fresh networks initialised from `cfg.train.seed`.
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let policy = Policy::new(cfg, &mut init);
        let critic = Critic::new(cfg, &mut init);
        let (rng_actor, rng_critic) = streams(cfg.train.seed);
        Ok(Self {
            layout: FeatureLayout::from_config(cfg),
            actor_opt: AdamW::for_params(&policy, cfg.train.weight_decay),
            critic_opt: AdamW::for_params(&critic, cfg.train.weight_decay),
            policy_ema: policy.clone(),
            critic_ema: critic.clone(),
            policy,
            critic,
            cfg: cfg.clone(),
            actor_steps: 0,
            critic_steps: 0,
            rng_actor,
            rng_critic,
            metrics: Vec::new(),
        })
    }

    /// Restarts both random streams from `seed` (recorded in the config);
    /// networks and optimiser state are untouched.
    pub fn reseed(&mut self, seed: u64) {
        self.cfg.train.seed = seed;
        (self.rng_actor, self.rng_critic) = streams(seed);
    }

    /// Empty dataset with this trainer's layout and chunk length.
    pub fn dataset(&self) -> Dataset {
        Dataset::new(&self.layout, self.cfg.sim.action_chunk)
    }

    pub fn dataset_from(&self, episodes: &[crate::episode::Episode]) -> Result<Dataset> {
        Dataset::from_episodes(episodes, &self.layout, self.cfg.sim.action_chunk)
    }

    fn flow_noise(&mut self, b: usize, al: usize) -> (Array2<f64>, Vec<f64>) {
        let rng = &mut self.rng_actor;
        let eps = Array2::from_shape_fn((b, al), |_| rng.sample::<f64, _>(StandardNormal));
        let tau = (0..b).map(|_| rng.random::<f64>()).collect();
        (eps, tau)
    }

    /// Gradient of the (weighted) flow-matching loss on `batch`, before
    /// clipping. Consumes flow noise from the actor stream.
    pub fn actor_gradient(&mut self, batch: &Batch, weights: Option<&[f64]>) -> Result<(f64, Policy)> {
        let (eps, tau) = self.flow_noise(batch.len(), self.policy.action_len());
        let mut g = zeros_like(&self.policy);
        let loss = self.policy.fm_loss_grad(&batch.x, &batch.a, &eps, &tau, weights, &mut g)?;
        if !all_finite(&g) {
            return Err(Error::NonFinite("actor gradient".into()));
        }
        Ok((loss, g))
    }

    /// One actor update: gradient, global-norm clipping, AdamW, EMA. On a
    /// non-finite loss or gradient the parameters are left untouched.
    /// Returns the loss and the pre-clipping gradient norm.
    pub fn actor_step(&mut self, batch: &Batch, weights: Option<&[f64]>, lr: f64) -> Result<(f64, f64)> {
        let (loss, mut g) = self.actor_gradient(batch, weights)?;
        let norm = clip_global_norm(&mut g, self.cfg.train.gradient_clipping);
        self.actor_opt.step(&mut self.policy, &g, lr)?;
        Ema { decay: self.cfg.train.ema_decay }.update(&mut self.policy_ema, &self.policy);
        self.actor_steps += 1;
        Ok((loss, norm))
    }

    /// One critic update on activations of the current (raw) policy encoder.
    pub fn critic_step(&mut self, batch: &Batch, lr: f64) -> Result<CriticLoss> {
        let enc = self.policy.encode(&batch.x);
        let mut g = zeros_like(&self.critic);
        let loss = self.critic.loss_grad(&enc.retained, &batch.targets, &mut g)?;
        if !loss.total().is_finite() || !all_finite(&g) {
            return Err(Error::NonFinite("critic loss or gradient".into()));
        }
        clip_global_norm(&mut g, self.cfg.train.gradient_clipping);
        self.critic_opt.step(&mut self.critic, &g, lr)?;
        Ema { decay: self.cfg.train.ema_decay }.update(&mut self.critic_ema, &self.critic);
        self.critic_steps += 1;
        Ok(loss)
    }

    /// Critic loss of the EMA critic on a dataset, averaged over blocks.
    pub fn critic_eval(&self, data: &Dataset) -> Result<CriticLoss> {
        const BLOCK: usize = 512;
        let mut acc = CriticLoss::default();
        let mut lo = 0;
        while lo < data.len() {
            let hi = (lo + BLOCK).min(data.len());
            let rows = (lo..hi).map(|i| (Source::Demo, i)).collect();
            let b = Batch::gather(data, None, rows);
            let enc = self.policy.encode(&b.x);
            let l = self.critic_ema.loss(&enc.retained, &b.targets)?;
            let w = (hi - lo) as f64 / data.len() as f64;
            acc.traj += w * l.traj;
            acc.sub += w * l.sub;
            acc.int += w * l.int;
            lo = hi;
        }
        Ok(acc)
    }

    pub fn actor_schedule(&self, total: usize) -> CosineSchedule {
        CosineSchedule {
            base: self.cfg.train.learning_rate_actor,
            warmup: self.cfg.train.lr_warmup_steps.min(total / 2),
            total,
        }
    }

    pub fn critic_schedule(&self, total: usize) -> CosineSchedule {
        CosineSchedule {
            base: self.cfg.train.learning_rate_critic,
            warmup: self.cfg.train.lr_warmup_steps.min(total / 2),
            total,
        }
    }

    /// Actor steps between critic steps implied by the update frequencies.
    pub fn critic_period(&self) -> usize {
        let t = &self.cfg.train;
        ((t.actor_update_frequency / t.critic_update_frequency).round() as usize).max(1)
    }
}
