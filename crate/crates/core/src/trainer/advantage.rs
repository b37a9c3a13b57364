use ndarray::Array2;

use crate::config::{ClipTarget, Config};
use crate::critic::{composite_value, Critic};
use crate::error::{Error, Result};
use crate::policy::Policy;

use super::data::Dataset;

/// N-step advantage of step `t` in an episode with per-step rewards `r` and
/// state values `v` (`v.len() == r.len()`, values of non-terminal states).
/// Windows that run past the end are truncated and bootstrap from the
/// terminal value 0.
pub fn n_step_advantage(r: &[f64], v: &[f64], t: usize, n: usize) -> Result<f64> {
    if r.len() != v.len() {
        return Err(Error::Shape("rewards and values differ in length".into()));
    }
    if t >= r.len() || n == 0 {
        return Err(Error::Usage("advantage index out of range or zero horizon".into()));
    }
    let end = (t + n).min(r.len());
    let boot = if t + n < r.len() { v[t + n] } else { 0.0 };
    Ok(r[t..end].iter().sum::<f64>() + boot - v[t])
}

/// Advantage-weighted regression weight `exp(adv / beta)` with clipping
/// applied either to the weight or to the advantage before exponentiation.
pub fn awr_weight(adv: f64, beta: f64, clip: [f64; 2], target: ClipTarget) -> f64 {
    match target {
        ClipTarget::Weight => (adv / beta).exp().clamp(clip[0], clip[1]),
        ClipTarget::Advantage => (adv.clamp(clip[0], clip[1]) / beta).exp(),
    }
}

/// Composite critic values of every transition in `data`, computed through
/// `policy`'s encoder in blocks.
pub fn dataset_values(policy: &Policy, critic: &Critic, data: &Dataset, cfg: &Config) -> Result<Vec<f64>> {
    const BLOCK: usize = 512;
    let mut out = Vec::with_capacity(data.len());
    let mut lo = 0;
    while lo < data.len() {
        let hi = (lo + BLOCK).min(data.len());
        let x: Array2<f64> = data.inputs(lo, hi);
        let enc = policy.encode(&x);
        for o in critic.forward(&enc.retained)? {
            out.push(composite_value(
                &o,
                cfg.reward.trajectory_reward_weight,
                cfg.reward.subtask_reward_weight,
                cfg.critic.composition,
            ));
        }
        lo = hi;
    }
    Ok(out)
}

/// N-step advantages for every transition given per-transition values.
pub fn dataset_advantages(data: &Dataset, values: &[f64], n: usize) -> Result<Vec<f64>> {
    if values.len() != data.len() {
        return Err(Error::Shape("one value per transition expected".into()));
    }
    let mut adv = Vec::with_capacity(data.len());
    for span in &data.episodes {
        let r = &data.r[span.start..span.start + span.len];
        let v = &values[span.start..span.start + span.len];
        for t in 0..span.len {
            adv.push(n_step_advantage(r, v, t, n)?);
        }
    }
    Ok(adv)
}

/// Mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64;
    (m, v.sqrt())
}
