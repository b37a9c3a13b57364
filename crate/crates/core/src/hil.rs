//! Interactive refinement: rollouts with stagnation-triggered or manual
//! takeovers, and the iterate-collect-update loop around them.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, PintSource, SnapshotKind};
use crate::critic::{composite_value, Critic, CriticOutput};
use crate::episode::{CriticReading, Episode, InterventionRecord, InterventionSource, InterventionTrigger};
use crate::error::{Error, Result};
use crate::policy::{temperature_for, Encoded, FeatureLayout, Policy};
use crate::sim::{noisy_expert_action, ActionRow, Env, Image, Observation, TaskSpec, WorldState, ACTION_DIM};
use crate::trainer::{run_hybrid_updates, Dataset, Trainer};

/// Fires when the composite value has not decreased by at least `delta`
/// over the last `window` control steps.
#[derive(Debug, Clone, PartialEq)]
pub struct StagnationMonitor {
    window: usize,
    delta: f64,
    history: VecDeque<f64>,
}

impl StagnationMonitor {
    pub fn new(window: usize, delta: f64) -> Result<Self> {
        if window == 0 || !(delta > 0.0) {
            return Err(Error::Config("stagnation window must be >= 1 and delta > 0".into()));
        }
        Ok(Self {
            window,
            delta,
            history: VecDeque::with_capacity(window + 1),
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::new(cfg.hil.stagnation_window, cfg.hil.stagnation_delta)
    }

    /// Records the value of the current step and reports whether the
    /// monitor fires.
    pub fn push(&mut self, value: f64) -> bool {
        self.history.push_back(value);
        if self.history.len() > self.window + 1 {
            self.history.pop_front();
        }
        self.history.len() == self.window + 1 && self.history[0] - value < self.delta
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }
}

/// Per-step stream published to an attached operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub step: usize,
    pub value: f64,
    pub ref_value: f64,
    pub p_int: f64,
    pub subtask: usize,
    pub stagnating: bool,
}

/// Provider of takeover actions: the scripted expert or a live operator.
pub trait Intervener {
    fn source(&self) -> InterventionSource;

    /// Called once per control step with the step's telemetry and frame,
    /// before any action is chosen. Returns `true` to request a manual
    /// takeover.
    fn observe(&mut self, telemetry: &Telemetry, frame: &Image) -> Result<bool>;

    /// Called when a takeover starts in `state`.
    fn begin(&mut self, env: &Env, state: &WorldState) -> Result<()>;

    /// Action for the current step of a takeover, or `None` to hand control
    /// back to the policy. A lost operator yields `Error::Disconnected`.
    fn act(&mut self, env: &Env, state: &WorldState) -> Result<Option<ActionRow>>;

    /// Called when the episode ends.
    fn episode_end(&mut self, _success: bool) -> Result<()> {
        Ok(())
    }

    /// Environment seed requested for the next rollout in place of the
    /// scheduled one.
    fn next_seed(&mut self) -> Option<u64> {
        None
    }
}

/// Scripted stand-in for a human: never requests manual takeovers; when the
/// monitor fires it drives the expert until the next subtask boundary.
#[derive(Debug, Clone)]
pub struct ScriptedIntervener {
    noise: f64,
    rng: ChaCha8Rng,
    release_after: usize,
}

impl ScriptedIntervener {
    pub fn new(noise: f64, seed: u64) -> Self {
        Self {
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
            release_after: 0,
        }
    }
}

impl Intervener for ScriptedIntervener {
    fn source(&self) -> InterventionSource {
        InterventionSource::Scripted
    }

    fn observe(&mut self, _: &Telemetry, _: &Image) -> Result<bool> {
        Ok(false)
    }

    fn begin(&mut self, _: &Env, state: &WorldState) -> Result<()> {
        self.release_after = state.subtask_index;
        Ok(())
    }

    fn act(&mut self, env: &Env, state: &WorldState) -> Result<Option<ActionRow>> {
        if state.subtask_index > self.release_after {
            return Ok(None);
        }
        match noisy_expert_action(env, state, self.noise, &mut self.rng) {
            Ok(a) => Ok(Some(a)),
            Err(Error::Unrecoverable(why)) => {
                log::info!("scripted takeover gives up: {why}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Never intervenes; used for evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoIntervention;

impl Intervener for NoIntervention {
    fn source(&self) -> InterventionSource {
        InterventionSource::Scripted
    }

    fn observe(&mut self, _: &Telemetry, _: &Image) -> Result<bool> {
        Ok(false)
    }

    fn begin(&mut self, _: &Env, _: &WorldState) -> Result<()> {
        Ok(())
    }

    fn act(&mut self, _: &Env, _: &WorldState) -> Result<Option<ActionRow>> {
        Ok(None)
    }
}

/// Policy and critic copies used to act.
#[derive(Debug, Clone, Copy)]
pub struct Snapshot<'a> {
    pub policy: &'a Policy,
    pub critic: &'a Critic,
}

impl<'a> Snapshot<'a> {
    /// The copy selected by `policy.rollout_params`, paired with the EMA critic.
    pub fn of(tr: &'a Trainer) -> Self {
        let policy = match tr.cfg.policy.rollout_params {
            SnapshotKind::Raw => &tr.policy,
            SnapshotKind::Ema => &tr.policy_ema,
        };
        Self {
            policy,
            critic: &tr.critic_ema,
        }
    }
}

/// Per-rollout settings.
#[derive(Debug, Clone, Copy)]
pub struct RolloutOptions {
    pub seed: u64,
    /// Seed of the sampling noise stream.
    pub noise_seed: u64,
    /// Whether the stagnation monitor may hand control to the intervener.
    pub monitor: bool,
    /// Expected episode length used for the displayed reference value.
    pub reference_len: usize,
}

/// Runs one episode from `env.reset(opts.seed)`. The critic is evaluated at
/// every control step; the policy samples a chunk at the temperature implied
/// by `p_int` and executes `execute_steps` of it before sampling again.
pub fn run_rollout(
    snap: Snapshot<'_>,
    cfg: &Config,
    env: &Env,
    intervener: &mut dyn Intervener,
    opts: &RolloutOptions,
) -> Result<Episode> {
    let layout = FeatureLayout::from_config(cfg);
    let mut monitor = StagnationMonitor::from_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
    let (mut state, obs, mask) = env.reset(opts.seed);
    let mut ep = Episode::begin(env, opts.seed, obs, mask);
    let mut queue: VecDeque<ActionRow> = VecDeque::new();
    let mut takeover: Option<(usize, InterventionTrigger)> = None;
    let mut last_truth = false;
    loop {
        let t = ep.len();
        let (enc, out, value) = assess(snap, cfg, &layout, &ep.final_observation)?;
        let p_int = match cfg.policy.p_int_source {
            PintSource::Critic => out.p_int,
            PintSource::GroundTruth => f64::from(u8::from(state.held_object.is_some() || last_truth)),
        };
        let ref_value = (1.0 - t as f64 / opts.reference_len.max(1) as f64).max(0.0);
        let stagnating = takeover.is_none() && monitor.push(value);
        let telemetry = Telemetry {
            step: t,
            value,
            ref_value,
            p_int,
            subtask: state.subtask_index,
            stagnating,
        };
        let manual = intervener.observe(&telemetry, &ep.final_observation.image)?;
        if takeover.is_none() && ((opts.monitor && stagnating) || manual) {
            let trigger = if manual {
                InterventionTrigger::Manual
            } else {
                InterventionTrigger::Stagnation
            };
            intervener.begin(env, &state)?;
            takeover = Some((t, trigger));
            queue.clear();
        }
        let mut action = None;
        if takeover.is_some() {
            action = intervener.act(env, &state)?;
            if action.is_none() {
                close_takeover(&mut ep, &mut takeover, intervener.source(), t);
                monitor.reset();
            }
        }
        let action = match action {
            Some(a) => a,
            None => {
                if queue.is_empty() {
                    let temp = temperature_for(p_int, &cfg.policy);
                    let chunk = snap.policy.sample_from_feature(&enc.feature, temp, cfg.policy.ode_steps, &mut rng)?;
                    for row in chunk.chunks(ACTION_DIM).take(cfg.policy.execute_steps) {
                        queue.push_back([row[0], row[1], row[2]]);
                    }
                }
                queue.pop_front().expect("queue refilled")
            }
        };
        let out_step = env.step(&state, &action)?;
        last_truth = out_step.interaction_truth;
        ep.push(
            action,
            takeover.is_some(),
            Some(CriticReading { value, ref_value, p_int }),
            &out_step,
        );
        state = out_step.state;
        if out_step.done {
            let end = ep.len();
            close_takeover(&mut ep, &mut takeover, intervener.source(), end);
            intervener.episode_end(ep.success)?;
            return Ok(ep);
        }
    }
}

/// Policy encoding, critic output and composite value for one observation.
fn assess(snap: Snapshot<'_>, cfg: &Config, layout: &FeatureLayout, obs: &Observation) -> Result<(Encoded, CriticOutput, f64)> {
    let x = layout.encode(obs)?;
    let xb = Array2::from_shape_vec((1, x.len()), x).expect("one row");
    let enc = snap.policy.encode(&xb);
    let out = snap.critic.forward(&enc.retained)?[0];
    let value = composite_value(
        &out,
        cfg.reward.trajectory_reward_weight,
        cfg.reward.subtask_reward_weight,
        cfg.critic.composition,
    );
    Ok((enc, out, value))
}

/// Critic readings for every frame of a recorded episode (the final
/// observation included), as a rollout would have logged them. The
/// interaction probability always comes from the critic here.
pub fn critic_readings(snap: Snapshot<'_>, cfg: &Config, ep: &Episode, reference_len: usize) -> Result<Vec<CriticReading>> {
    let layout = FeatureLayout::from_config(cfg);
    (0..=ep.len())
        .map(|t| {
            let (_, out, value) = assess(snap, cfg, &layout, ep.observation(t))?;
            Ok(CriticReading {
                value,
                ref_value: (1.0 - t as f64 / reference_len.max(1) as f64).max(0.0),
                p_int: out.p_int,
            })
        })
        .collect()
}

fn close_takeover(
    ep: &mut Episode,
    takeover: &mut Option<(usize, InterventionTrigger)>,
    source: InterventionSource,
    end: usize,
) {
    if let Some((start, trigger)) = takeover.take() {
        if end > start {
            ep.interventions.push(InterventionRecord { start, end, source, trigger });
        }
    }
}

/// Adds interaction labels and rewards so a rollout matches the
/// demonstration schema; success is the simulator's verdict.
pub fn annotate_real_episode(ep: &mut Episode, cfg: &Config, task: &TaskSpec) -> Result<()> {
    ep.validate()?;
    ep.annotate(cfg, task)?;
    ep.validate()
}

/// Environment seed of rollout `r` in iteration `it`; disjoint from
/// demonstration and evaluation seeds for seeds below 1000.
pub fn rollout_seed(seed: u64, it: usize, r: usize) -> u64 {
    5_000_000_000 + seed * 1_000_000 + (it as u64) * 1_000 + r as u64
}

/// Summary of one collect-and-update iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub rollouts: usize,
    pub aborted: usize,
    pub successes: usize,
    /// Takeover events across the iteration's rollouts.
    pub interventions: usize,
    /// Rollouts with at least one takeover.
    pub episodes_with_intervention: usize,
    pub intervention_steps: usize,
}

/// Iterations of rollout collection followed by hybrid updates. Kept
/// rollouts are annotated, appended to `real` and `real_episodes`; rollouts
/// aborted by a disconnect or an operator reset are logged and dropped. `after_iteration` runs
/// after each iteration's updates.
#[allow(clippy::too_many_arguments)]
pub fn run_stage_iii(
    tr: &mut Trainer,
    task: &TaskSpec,
    demo: &Dataset,
    real: &mut Dataset,
    real_episodes: &mut Vec<Episode>,
    intervener: &mut dyn Intervener,
    seed: u64,
    after_iteration: &mut dyn FnMut(&Trainer, &IterationSummary) -> Result<()>,
) -> Result<Vec<IterationSummary>> {
    let cfg = tr.cfg.clone();
    let env = Env::new(task.clone(), cfg.sim.clone())?;
    let reference_len = mean_episode_len(demo).unwrap_or_else(|| env.max_steps());
    let per_iter = cfg.hil.updates_per_iteration;
    let total = cfg.hil.hitl_rl_iterations * per_iter;
    let mut summaries = Vec::new();
    for it in 0..cfg.hil.hitl_rl_iterations {
        let mut s = IterationSummary {
            iteration: it,
            rollouts: 0,
            aborted: 0,
            successes: 0,
            interventions: 0,
            episodes_with_intervention: 0,
            intervention_steps: 0,
        };
        for r in 0..cfg.hil.hitl_rl_update_interval {
            let env_seed = intervener.next_seed().unwrap_or_else(|| rollout_seed(seed, it, r));
            let opts = RolloutOptions {
                seed: env_seed,
                noise_seed: env_seed ^ 0x5eed,
                monitor: true,
                reference_len,
            };
            let mut ep = match run_rollout(Snapshot::of(tr), &cfg, &env, intervener, &opts) {
                Ok(ep) => ep,
                Err(e @ (Error::Disconnected(_) | Error::Aborted(_))) => {
                    log::warn!("rollout {r} of iteration {it} dropped: {e}");
                    s.aborted += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            annotate_real_episode(&mut ep, &cfg, task)?;
            s.rollouts += 1;
            s.successes += usize::from(ep.success);
            s.interventions += ep.interventions.len();
            s.episodes_with_intervention += usize::from(!ep.interventions.is_empty());
            s.intervention_steps += ep.intervention_steps();
            real.push_episode(&ep, &tr.layout)?;
            real_episodes.push(ep);
        }
        run_hybrid_updates(tr, demo, real, it * per_iter, per_iter, total)?;
        log::info!(
            "iteration {it}: {} rollouts, {} successes, {} takeovers",
            s.rollouts,
            s.successes,
            s.interventions
        );
        after_iteration(tr, &s)?;
        summaries.push(s);
    }
    Ok(summaries)
}

fn mean_episode_len(d: &Dataset) -> Option<usize> {
    if d.episodes.is_empty() {
        return None;
    }
    let sum: usize = d.episodes.iter().map(|e| e.len).sum();
    Some((sum as f64 / d.episodes.len() as f64).round() as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::generate_demos;
    use crate::nn::fill;
    use crate::sim::expert_action;
    use crate::trainer::tests::tiny_config;

    #[test]
    fn monitor_fires_on_flat_values_only() {
        let mut m = StagnationMonitor::new(3, 0.01).unwrap();
        assert!(!m.push(1.0) && !m.push(1.0) && !m.push(1.0));
        assert!(m.push(1.0));
        m.reset();
        let falling: Vec<bool> = (0..20).map(|i| m.push(1.0 - 0.005 * i as f64)).collect();
        assert!(falling.iter().all(|f| !f));
        assert!(StagnationMonitor::new(0, 0.1).is_err());
        assert!(StagnationMonitor::new(2, 0.0).is_err());
    }

    #[test]
    fn monitor_is_silent_when_value_tracks_reference() {
        // A value within delta/2 of a reference that falls by more than
        // 2 * delta per window never fires.
        let (w, delta) = (40, 0.01);
        let mut m = StagnationMonitor::new(w, delta).unwrap();
        let len = 300;
        for t in 0..len {
            let reference = 1.0 - t as f64 / len as f64;
            let wobble = if t % 2 == 0 { delta / 2.0 } else { -delta / 2.0 };
            assert!(!m.push(reference + wobble), "fired at {t}");
        }
    }

    /// Policy whose chunks are all zeros: the gripper never moves.
    fn frozen(tr: &mut Trainer) {
        fill(&mut tr.policy_ema.velocity, 0.0);
        fill(&mut tr.critic_ema, 0.0);
    }

    fn setup() -> (Trainer, TaskSpec, Env) {
        let cfg = tiny_config();
        let tr = Trainer::new(&cfg).unwrap();
        let task = cfg.task("pack-2").unwrap();
        let env = Env::new(task.clone(), cfg.sim.clone()).unwrap();
        (tr, task, env)
    }

    fn opts(monitor: bool) -> RolloutOptions {
        RolloutOptions {
            seed: 4,
            noise_seed: 4,
            monitor,
            reference_len: 200,
        }
    }

    #[test]
    fn frozen_policy_triggers_takeover_within_window() {
        let (mut tr, task, env) = setup();
        frozen(&mut tr);
        let mut src = ScriptedIntervener::new(0.0, 0);
        let ep = run_rollout(Snapshot::of(&tr), &tr.cfg, &env, &mut src, &opts(true)).unwrap();
        let first = ep.interventions.first().expect("monitor fired");
        assert_eq!(first.start, tr.cfg.hil.stagnation_window);
        assert_eq!(first.trigger, InterventionTrigger::Stagnation);
        assert_eq!(first.source, InterventionSource::Scripted);
        // Each takeover ends at a subtask boundary and the record matches the flags.
        for rec in &ep.interventions {
            assert!(rec.start < rec.end && rec.end <= ep.len());
            assert!(ep.steps[rec.start..rec.end].iter().all(|s| s.intervention));
        }
        let flagged = ep.steps.iter().filter(|s| s.intervention).count();
        assert_eq!(flagged, ep.intervention_steps());
        let mut ep = ep;
        annotate_real_episode(&mut ep, &tr.cfg, &task).unwrap();
        ep.validate().unwrap();
    }

    #[test]
    fn without_monitor_frozen_policy_fails_with_zero_reward() {
        let (mut tr, task, env) = setup();
        frozen(&mut tr);
        let mut ep = run_rollout(Snapshot::of(&tr), &tr.cfg, &env, &mut NoIntervention, &opts(false)).unwrap();
        assert!(!ep.success && ep.interventions.is_empty());
        assert_eq!(ep.len(), env.max_steps());
        annotate_real_episode(&mut ep, &tr.cfg, &task).unwrap();
        assert!(ep.annotation().unwrap().r_traj.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn offline_readings_reproduce_online_ones() {
        let (tr, _, env) = setup();
        let ep = run_rollout(Snapshot::of(&tr), &tr.cfg, &env, &mut NoIntervention, &opts(false)).unwrap();
        let offline = critic_readings(Snapshot::of(&tr), &tr.cfg, &ep, 200).unwrap();
        assert_eq!(offline.len(), ep.len() + 1);
        for (t, s) in ep.steps.iter().enumerate() {
            assert_eq!(s.critic, Some(offline[t]), "step {t}");
        }
    }

    /// Hands over at a fixed step and runs the expert to the end.
    struct ManualExpert {
        at: usize,
    }

    impl Intervener for ManualExpert {
        fn source(&self) -> InterventionSource {
            InterventionSource::Human
        }
        fn observe(&mut self, t: &Telemetry, _: &Image) -> Result<bool> {
            Ok(t.step == self.at)
        }
        fn begin(&mut self, _: &Env, _: &WorldState) -> Result<()> {
            Ok(())
        }
        fn act(&mut self, env: &Env, s: &WorldState) -> Result<Option<ActionRow>> {
            expert_action(env, s).map(Some)
        }
    }

    #[test]
    fn manual_takeover_from_mid_task_completes_and_is_recorded_verbatim() {
        let (tr, task, env) = setup();
        let mut src = ManualExpert { at: 7 };
        let mut ep = run_rollout(Snapshot::of(&tr), &tr.cfg, &env, &mut src, &opts(false)).unwrap();
        assert!(ep.success);
        assert_eq!(ep.interventions.len(), 1);
        let rec = ep.interventions[0];
        assert_eq!((rec.start, rec.end, rec.trigger), (7, ep.len(), InterventionTrigger::Manual));
        assert_eq!(rec.source, InterventionSource::Human);
        annotate_real_episode(&mut ep, &tr.cfg, &task).unwrap();
        let sum: f64 = ep.annotation().unwrap().r.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    struct Dropping;

    impl Intervener for Dropping {
        fn source(&self) -> InterventionSource {
            InterventionSource::Human
        }
        fn observe(&mut self, t: &Telemetry, _: &Image) -> Result<bool> {
            Ok(t.step == 2)
        }
        fn begin(&mut self, _: &Env, _: &WorldState) -> Result<()> {
            Ok(())
        }
        fn act(&mut self, _: &Env, _: &WorldState) -> Result<Option<ActionRow>> {
            Err(Error::Disconnected("operator left".into()))
        }
    }

    #[test]
    fn stage_iii_collects_and_drops_aborted_rollouts() {
        let (mut tr, task, _) = setup();
        tr.cfg.hil.hitl_rl_iterations = 2;
        tr.cfg.hil.hitl_rl_update_interval = 2;
        tr.cfg.hil.updates_per_iteration = 3;
        let demos = generate_demos(&tr.cfg, "pack-2", 1, 0.0, 0).unwrap();
        tr.cfg.sim.max_episode_steps = Some(30);
        let demo = tr.dataset_from(&demos).unwrap();
        let mut real = tr.dataset();
        let mut eps = Vec::new();
        let mut calls = 0;
        let s = run_stage_iii(
            &mut tr,
            &task,
            &demo,
            &mut real,
            &mut eps,
            &mut ScriptedIntervener::new(0.0, 0),
            0,
            &mut |_, _| {
                calls += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(s.iter().map(|x| x.rollouts).sum::<usize>(), 4);
        assert_eq!(eps.len(), 4);
        assert_eq!(real.episodes.len(), 4);
        assert_eq!(tr.actor_steps, 6);

        let mut real2 = tr.dataset();
        let mut eps2 = Vec::new();
        let s = run_stage_iii(&mut tr, &task, &demo, &mut real2, &mut eps2, &mut Dropping, 0, &mut |_, _| Ok(())).unwrap();
        assert_eq!(s.iter().map(|x| x.aborted).sum::<usize>(), 4);
        assert!(eps2.is_empty() && real2.is_empty());
    }

    #[test]
    fn rollouts_are_deterministic() {
        let (tr, _, env) = setup();
        let a = run_rollout(Snapshot::of(&tr), &tr.cfg, &env, &mut NoIntervention, &opts(false)).unwrap();
        let b = run_rollout(Snapshot::of(&tr), &tr.cfg, &env, &mut NoIntervention, &opts(false)).unwrap();
        assert_eq!(a, b);
    }
}
