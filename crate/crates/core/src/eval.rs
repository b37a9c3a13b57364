//! Seeded evaluation: success rate, subtask progress and failure points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::episode::Episode;
use crate::error::Result;
use crate::hil::{run_rollout, NoIntervention, RolloutOptions, Snapshot};
use crate::sim::{expert_action, Env, TaskSpec};

/// What acts during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum EvalPolicy<'a> {
    Learned(Snapshot<'a>),
    Expert,
    /// Uniform random actions in the action box.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub episodes: usize,
    pub seed: u64,
    pub successes: usize,
    pub success_rate: f64,
    /// 95% Wilson score interval of the success rate.
    pub success_ci95: [f64; 2],
    /// Mean fraction of subtasks completed.
    pub progress: f64,
    /// 95% normal-approximation interval of the mean progress, clipped to [0, 1].
    pub progress_ci95: [f64; 2],
    /// `failures_at[k]`: failed episodes that stopped with exactly `k`
    /// subtasks completed.
    pub failures_at: Vec<usize>,
    pub mean_length: f64,
}

/// Environment seed of evaluation episode `i`; disjoint from rollout and
/// demonstration seeds for seeds below 1000.
pub fn eval_seed(seed: u64, i: usize) -> u64 {
    9_000_000_000 + seed * 1_000_000 + i as u64
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> [f64; 2] {
    if n == 0 {
        return [0.0, 1.0];
    }
    let z = 1.959_963_984_540_054;
    let (n, p) = (n as f64, k as f64 / n as f64);
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    [(centre - half).max(0.0), (centre + half).min(1.0)]
}

/// Runs one episode of `policy` from `env.reset(seed)`.
pub fn eval_episode(policy: EvalPolicy<'_>, cfg: &Config, env: &Env, seed: u64, reference_len: usize) -> Result<Episode> {
    match policy {
        EvalPolicy::Learned(snap) => {
            let opts = RolloutOptions {
                seed,
                noise_seed: seed ^ 0xe7a1,
                monitor: false,
                reference_len,
            };
            run_rollout(snap, cfg, env, &mut NoIntervention, &opts)
        }
        EvalPolicy::Expert => scripted(env, seed, |s, _| expert_action(env, s)),
        EvalPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a4d);
            scripted(env, seed, move |_, _| {
                Ok([
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                    rng.random_range(-1.0..=1.0),
                ])
            })
        }
    }
}

fn scripted<F>(env: &Env, seed: u64, mut act: F) -> Result<Episode>
where
    F: FnMut(&crate::sim::WorldState, usize) -> Result<crate::sim::ActionRow>,
{
    let (mut s, obs, mask) = env.reset(seed);
    let mut ep = Episode::begin(env, seed, obs, mask);
    loop {
        let a = act(&s, ep.len())?;
        let out = env.step(&s, &a)?;
        ep.push(a, false, None, &out);
        if out.done {
            return Ok(ep);
        }
        s = out.state;
    }
}

/// Evaluates `policy` on `n` seeded episodes of `task`.
pub fn evaluate(policy: EvalPolicy<'_>, cfg: &Config, task: &TaskSpec, n: usize, seed: u64) -> Result<EvalReport> {
    let env = Env::new(task.clone(), cfg.sim.clone())?;
    let k = task.n_subtasks();
    let mut successes = 0;
    let mut progress = Vec::with_capacity(n);
    let mut failures_at = vec![0; k];
    let mut total_len = 0;
    for i in 0..n {
        let ep = eval_episode(policy, cfg, &env, eval_seed(seed, i), env.max_steps())?;
        let done = ep.subtasks_completed().min(k);
        total_len += ep.len();
        if ep.success {
            successes += 1;
        } else {
            failures_at[done.min(k - 1)] += 1;
        }
        progress.push(done as f64 / k as f64);
    }
    let nf = n.max(1) as f64;
    let mean = progress.iter().sum::<f64>() / nf;
    let var = progress.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (nf - 1.0).max(1.0);
    let half = 1.959_963_984_540_054 * (var / nf).sqrt();
    Ok(EvalReport {
        task: task.name.clone(),
        episodes: n,
        seed,
        successes,
        success_rate: successes as f64 / nf,
        success_ci95: wilson_interval(successes, n),
        progress: mean,
        progress_ci95: [(mean - half).max(0.0), (mean + half).min(1.0)],
        failures_at,
        mean_length: total_len as f64 / nf,
    })
}
