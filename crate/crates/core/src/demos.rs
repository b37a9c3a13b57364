//! Scripted-expert demonstration generation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::sim::{noisy_expert_action, Env};

/// Runs the expert with Gaussian action noise of standard deviation `noise`
/// from `env.reset(seed)` until the episode ends. Returns `Unrecoverable`
/// if the noise pushes the world into a state the expert cannot finish.
pub fn expert_rollout<R: Rng + ?Sized>(env: &Env, seed: u64, noise: f64, rng: &mut R) -> Result<Episode> {
    let (mut s, obs, mask) = env.reset(seed);
    let mut ep = Episode::begin(env, seed, obs, mask);
    loop {
        let a = noisy_expert_action(env, &s, noise, rng)?;
        let out = env.step(&s, &a)?;
        ep.push(a, false, None, &out);
        if out.done {
            return Ok(ep);
        }
        s = out.state;
    }
}

/// `count` annotated, successful expert episodes of `task`. Each episode
/// draws its noise scale uniformly from `[0, noise_scale]`; episodes the
/// noisy expert fails to finish are discarded and replaced with the next
/// environment seed.
pub fn generate_demos(cfg: &Config, task: &str, count: usize, noise_scale: f64, seed: u64) -> Result<Vec<Episode>> {
    if !(noise_scale >= 0.0) {
        return Err(Error::Usage("noise scale must be non-negative".into()));
    }
    let spec = cfg.task(task)?;
    let env = Env::new(spec.clone(), cfg.sim.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let max_attempts = 10 * count.max(1);
    let mut attempt = 0u64;
    while out.len() < count {
        if attempt as usize >= max_attempts {
            return Err(Error::Unrecoverable(format!(
                "only {} of {count} demonstrations succeeded in {max_attempts} attempts",
                out.len()
            )));
        }
        let env_seed = seed.wrapping_mul(1_000_003).wrapping_add(attempt);
        attempt += 1;
        let noise = noise_scale * rng.random::<f64>();
        let mut ep = match expert_rollout(&env, env_seed, noise, &mut rng) {
            Ok(ep) if ep.success => ep,
            Ok(_) | Err(Error::Unrecoverable(_)) => {
                log::debug!("discarding demonstration seed {env_seed}");
                continue;
            }
            Err(e) => return Err(e),
        };
        ep.annotate(cfg, &spec)?;
        out.push(ep);
    }
    Ok(out)
}
