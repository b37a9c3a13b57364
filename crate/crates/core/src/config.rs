//! Run configuration.
//!
//! One TOML file with `[sim]`, `[interaction]`, `[reward]`, `[policy]`,
//! `[critic]`, `[train]` and `[hil]` sections. Every field has a desk-scale
//! default, so a partial file (or none at all) is valid. `configs/desk.toml`
//! spells out the defaults and `configs/paper-scale.toml` holds the full-scale
//! values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::TaskSpec;

/// Environment variable consulted when no `--config` path is given.
pub const CONFIG_ENV: &str = "IGRFT_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub interaction: InteractionConfig,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub critic: CriticConfig,
    pub train: TrainConfig,
    pub hil: HilConfig,
    /// Task definitions; the built-in tasks are used when empty.
    #[serde(rename = "task")]
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub image_size: usize,
    pub world_size: f64,
    pub grasp_radius: f64,
    pub place_tolerance: f64,
    /// Gripper displacement (world units) for a unit action component.
    pub max_speed: f64,
    pub action_chunk: usize,
    /// Overrides each task's own step limit when set.
    pub max_episode_steps: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            world_size: 32.0,
            grasp_radius: 2.0,
            place_tolerance: 1.5,
            max_speed: 1.0,
            action_chunk: 8,
            max_episode_steps: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionConfig {
    /// Threshold on the squared motion magnitude of a pixel.
    pub ig_flow_threshold: f64,
    /// A step is an interaction step when strictly more than this many
    /// non-robot pixels move.
    pub ig_pixel_threshold: usize,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        // 0.0013 of a 64x64 frame, the same area fraction as 400 px at 640x480.
        Self {
            ig_flow_threshold: 0.05,
            ig_pixel_threshold: 5,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self, frame_pixels: usize) -> Result<()> {
        if !(self.ig_flow_threshold > 0.0) {
            return Err(Error::Config("ig_flow_threshold must be > 0".into()));
        }
        if self.ig_pixel_threshold == 0 || self.ig_pixel_threshold >= frame_pixels {
            return Err(Error::Config(format!(
                "ig_pixel_threshold must lie in (0, {frame_pixels})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub trajectory_reward_weight: f64,
    pub subtask_reward_weight: f64,
    pub sharpness: f64,
    pub discount_factor: f64,
    /// Per-task subtask importance weights (normalized on use). Uniform when absent.
    pub subtask_weights: std::collections::BTreeMap<String, Vec<f64>>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            trajectory_reward_weight: 0.4,
            subtask_reward_weight: 0.6,
            sharpness: 0.02,
            discount_factor: 1.0,
            subtask_weights: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PintSource {
    Critic,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotKind {
    Raw,
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Average-pooling factor applied to the frame before the encoder.
    pub image_pool: usize,
    /// Append per-colour pixel centroids, relative to the gripper, to the
    /// encoder input.
    pub color_keypoints: bool,
    pub encoder_width: usize,
    pub encoder_layers: usize,
    /// Encoder layers whose activations feed the critic; the last three when empty.
    pub retained_layers: Vec<usize>,
    pub velocity_width: usize,
    pub velocity_layers: usize,
    pub time_embed_dim: usize,
    pub ode_steps: usize,
    /// Steps of each sampled chunk executed before the policy is queried again.
    pub execute_steps: usize,
    pub exploration_sigma_base: f64,
    pub exploration_sigma_min: f64,
    pub exploration_modulation_alpha: f64,
    pub p_int_source: PintSource,
    /// Which parameter copy drives rollouts and evaluation.
    pub rollout_params: SnapshotKind,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            image_pool: 16,
            color_keypoints: true,
            encoder_width: 128,
            encoder_layers: 3,
            retained_layers: Vec::new(),
            velocity_width: 128,
            velocity_layers: 3,
            time_embed_dim: 16,
            ode_steps: 10,
            execute_steps: 4,
            exploration_sigma_base: 0.5,
            exploration_sigma_min: 0.2,
            exploration_modulation_alpha: 0.9,
            p_int_source: PintSource::Critic,
            rollout_params: SnapshotKind::Ema,
        }
    }
}

impl PolicyConfig {
    pub fn retained(&self) -> Vec<usize> {
        if self.retained_layers.is_empty() {
            let n = self.encoder_layers;
            (n.saturating_sub(3)..n).collect()
        } else {
            self.retained_layers.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueComposition {
    /// `omega_traj * v_traj + omega_sub * v_sub`
    Weighted,
    TrajectoryOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub n_queries: usize,
    pub dim: usize,
    pub heads: usize,
    pub head_hidden: usize,
    /// Each retained activation vector is split into this many tokens.
    pub tokens_per_layer: usize,
    pub composition: ValueComposition,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            n_queries: 4,
            dim: 32,
            heads: 4,
            head_hidden: 16,
            tokens_per_layer: 4,
            composition: ValueComposition::Weighted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipTarget {
    /// Clip the exponentiated weight.
    Weight,
    /// Clip the raw advantage before exponentiation.
    Advantage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate_actor: f64,
    pub learning_rate_critic: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub gradient_clipping: f64,
    pub ema_decay: f64,
    pub lr_warmup_steps: usize,
    /// Number of actor steps in Stage I.
    pub sft_warmup_steps: usize,
    /// Critic steps in Stage I; they run alongside the last actor steps.
    pub critic_warmup_steps: usize,
    pub offline_rl_training_steps: usize,
    pub awr_temperature_beta: f64,
    pub advantage_clipping: [f64; 2],
    pub clip_target: ClipTarget,
    /// Horizon of the N-step advantage; the action chunk length when absent.
    pub advantage_horizon: Option<usize>,
    pub actor_update_frequency: f64,
    pub critic_update_frequency: f64,
    /// Actor steps between recomputations of the advantage table.
    pub advantage_refresh_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            learning_rate_actor: 3e-3,
            learning_rate_critic: 5e-4,
            weight_decay: 1e-4,
            batch_size: 64,
            gradient_clipping: 1.0,
            ema_decay: 0.99,
            lr_warmup_steps: 100,
            sft_warmup_steps: 2000,
            critic_warmup_steps: 800,
            offline_rl_training_steps: 5000,
            awr_temperature_beta: 0.05,
            advantage_clipping: [0.0, 10.0],
            clip_target: ClipTarget::Weight,
            advantage_horizon: None,
            actor_update_frequency: 1.0,
            critic_update_frequency: 0.5,
            advantage_refresh_interval: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate_actor", self.learning_rate_actor),
            ("learning_rate_critic", self.learning_rate_critic),
            ("gradient_clipping", self.gradient_clipping),
            ("awr_temperature_beta", self.awr_temperature_beta),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in [0, 1)".into()));
        }
        for (name, f) in [
            ("actor_update_frequency", self.actor_update_frequency),
            ("critic_update_frequency", self.critic_update_frequency),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1]")));
            }
        }
        let [lo, hi] = self.advantage_clipping;
        if !(lo <= hi) {
            return Err(Error::Config("advantage_clipping must be [lo, hi] with lo <= hi".into()));
        }
        if self.critic_warmup_steps > self.sft_warmup_steps {
            return Err(Error::Config(
                "critic_warmup_steps cannot exceed sft_warmup_steps".into(),
            ));
        }
        if self.advantage_refresh_interval == 0 {
            return Err(Error::Config("advantage_refresh_interval must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HilConfig {
    pub hitl_rl_iterations: usize,
    /// Rollouts collected between consecutive policy updates.
    pub hitl_rl_update_interval: usize,
    /// Actor steps run after each batch of rollouts.
    pub updates_per_iteration: usize,
    /// Control steps the composite value has to keep decreasing over.
    pub stagnation_window: usize,
    pub stagnation_delta: f64,
    /// Noise added to scripted takeover actions.
    pub scripted_noise: f64,
    /// Wall-clock pacing of control steps while a live operator is attached.
    pub step_period_ms: u64,
}

impl Default for HilConfig {
    fn default() -> Self {
        Self {
            hitl_rl_iterations: 4,
            hitl_rl_update_interval: 10,
            updates_per_iteration: 500,
            stagnation_window: 20,
            stagnation_delta: 0.01,
            scripted_noise: 0.0,
            step_period_ms: 100,
        }
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Loads `explicit`, else the file named by `IGRFT_CONFIG`, else the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        if let Some(p) = explicit {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(&PathBuf::from(p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let px = self.sim.image_size * self.sim.image_size;
        self.interaction.validate(px)?;
        self.train.validate()?;
        if self.sim.image_size == 0 || self.sim.world_size <= 0.0 {
            return Err(Error::Config("sim dimensions must be positive".into()));
        }
        if self.sim.action_chunk == 0 {
            return Err(Error::Config("action_chunk must be > 0".into()));
        }
        if self.policy.execute_steps == 0 || self.policy.execute_steps > self.sim.action_chunk {
            return Err(Error::Config("execute_steps must lie in [1, action_chunk]".into()));
        }
        if self.policy.ode_steps == 0 {
            return Err(Error::Config("ode_steps must be > 0".into()));
        }
        if self.policy.image_pool == 0 || self.sim.image_size % self.policy.image_pool != 0 {
            return Err(Error::Config("image_pool must divide image_size".into()));
        }
        if self.policy.encoder_layers == 0 || self.policy.velocity_layers < 2 {
            return Err(Error::Config("policy network too shallow".into()));
        }
        if self
            .policy
            .retained()
            .iter()
            .any(|&l| l >= self.policy.encoder_layers)
        {
            return Err(Error::Config("retained layer index out of range".into()));
        }
        if self.policy.encoder_width % self.critic.tokens_per_layer != 0 {
            return Err(Error::Config(
                "tokens_per_layer must divide encoder_width".into(),
            ));
        }
        if self.critic.dim % self.critic.heads != 0 {
            return Err(Error::Config("critic heads must divide critic dim".into()));
        }
        let w = (self.reward.trajectory_reward_weight, self.reward.subtask_reward_weight);
        if w.0 < 0.0 || w.1 < 0.0 || (w.0 + w.1 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "reward weights must be non-negative and sum to 1".into(),
            ));
        }
        if self.reward.discount_factor != 1.0 {
            return Err(Error::Config("only an undiscounted return is supported".into()));
        }
        if !(self.reward.sharpness > 0.0) {
            return Err(Error::Config("reward sharpness must be > 0".into()));
        }
        let p = &self.policy;
        if !(p.exploration_sigma_min > 0.0)
            || p.exploration_sigma_base < 0.0
            || !(0.0..=1.0).contains(&p.exploration_modulation_alpha)
        {
            return Err(Error::Config("invalid exploration temperature settings".into()));
        }
        if self.hil.stagnation_window == 0 || !(self.hil.stagnation_delta > 0.0) {
            return Err(Error::Config("invalid stagnation monitor settings".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        Ok(())
    }

    pub fn advantage_horizon(&self) -> usize {
        self.train.advantage_horizon.unwrap_or(self.sim.action_chunk)
    }

    /// Task definitions in effect, falling back to the built-ins.
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        if self.tasks.is_empty() {
            TaskSpec::builtin()
        } else {
            self.tasks.clone()
        }
    }

    pub fn task(&self, name: &str) -> Result<TaskSpec> {
        self.task_specs()
            .into_iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Config(format!("unknown task `{name}`")))
    }

    /// Upper bound on the subtask count over all tasks; sizes the observation encoding.
    pub fn max_subtasks(&self) -> usize {
        self.task_specs().iter().map(|t| t.subtasks.len()).max().unwrap_or(0)
    }

    pub fn n_tasks(&self) -> usize {
        self.task_specs()
            .iter()
            .map(|t| t.task_id + 1)
            .max()
            .unwrap_or(0)
    }
}
