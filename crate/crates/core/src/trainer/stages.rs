use super::advantage::{awr_weight, dataset_advantages, dataset_values, mean_std};
use super::data::{hybrid_rows, uniform_rows, Batch, Dataset, Source};
use super::{MetricRow, Stage, Trainer};
use crate::error::{Error, Result};

/// Per-transition advantages for the demonstration and real buffers,
/// computed with the EMA critic on the current policy encoder.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdvantageTables {
    pub demo: Vec<f64>,
    pub real: Vec<f64>,
}

impl AdvantageTables {
    pub fn compute(tr: &Trainer, demo: &Dataset, real: Option<&Dataset>) -> Result<Self> {
        let n = tr.cfg.advantage_horizon();
        let table = |d: &Dataset| -> Result<Vec<f64>> {
            let v = dataset_values(&tr.policy, &tr.critic_ema, d, &tr.cfg)?;
            dataset_advantages(d, &v, n)
        };
        Ok(Self {
            demo: table(demo)?,
            real: match real {
                Some(r) => table(r)?,
                None => Vec::new(),
            },
        })
    }

    pub fn get(&self, src: Source, i: usize) -> f64 {
        match src {
            Source::Demo => self.demo[i],
            Source::Real => self.real[i],
        }
    }
}

fn require_data(demo: &Dataset) -> Result<()> {
    if demo.is_empty() {
        return Err(Error::Usage("training needs at least one demonstration transition".into()));
    }
    Ok(())
}

/// Supervised warm-up: `sft_warmup_steps` unweighted actor steps on the
/// demonstrations, with the critic trained alongside the last
/// `critic_warmup_steps` of them.
pub fn run_stage_i(tr: &mut Trainer, demo: &Dataset) -> Result<()> {
    require_data(demo)?;
    let n = tr.cfg.train.sft_warmup_steps;
    let nc = tr.cfg.train.critic_warmup_steps.min(n);
    let (sa, sc) = (tr.actor_schedule(n), tr.critic_schedule(nc));
    let b = tr.cfg.train.batch_size;
    for s in 0..n {
        let rows = uniform_rows(demo.len(), b, Source::Demo, &mut tr.rng_actor);
        let batch = Batch::gather(demo, None, rows);
        let lr = sa.lr(s);
        let (loss, norm) = tr.actor_step(&batch, None, lr)?;
        let critic = if s >= n - nc {
            let rows = uniform_rows(demo.len(), b, Source::Demo, &mut tr.rng_critic);
            let cb = Batch::gather(demo, None, rows);
            Some(tr.critic_step(&cb, sc.lr(s - (n - nc)))?)
        } else {
            None
        };
        tr.metrics.push(MetricRow {
            stage: Stage::Sft,
            actor_step: tr.actor_steps,
            lr_actor: lr,
            actor_loss: loss,
            grad_norm: norm,
            critic,
            adv_mean: f64::NAN,
            adv_std: f64::NAN,
            weight_mean: f64::NAN,
        });
    }
    Ok(())
}

/// Offline advantage-weighted regression on the demonstrations.
pub fn run_stage_ii(tr: &mut Trainer, demo: &Dataset) -> Result<()> {
    require_data(demo)?;
    let n = tr.cfg.train.offline_rl_training_steps;
    weighted_loop(tr, demo, None, Stage::Offline, 0, n, n)
}

/// `count` hybrid actor steps (half demonstrations, half real rollouts),
/// numbered from `start` within a stage of `total` steps for the learning
/// rate schedule.
pub fn run_hybrid_updates(
    tr: &mut Trainer,
    demo: &Dataset,
    real: &Dataset,
    start: usize,
    count: usize,
    total: usize,
) -> Result<()> {
    require_data(demo)?;
    weighted_loop(tr, demo, Some(real), Stage::Hitl, start, count, total)
}

fn weighted_loop(
    tr: &mut Trainer,
    demo: &Dataset,
    real: Option<&Dataset>,
    stage: Stage,
    start: usize,
    count: usize,
    total: usize,
) -> Result<()> {
    let t = tr.cfg.train.clone();
    let period = tr.critic_period();
    let (sa, sc) = (tr.actor_schedule(total), tr.critic_schedule(total.div_ceil(period)));
    let n_real = real.map_or(0, Dataset::len);
    let mut tables = AdvantageTables::compute(tr, demo, real)?;
    for s in start..start + count {
        if s > start && (s - start) % t.advantage_refresh_interval == 0 {
            tables = AdvantageTables::compute(tr, demo, real)?;
        }
        let rows = match stage {
            Stage::Hitl => hybrid_rows(demo.len(), n_real, t.batch_size, &mut tr.rng_actor),
            _ => uniform_rows(demo.len(), t.batch_size, Source::Demo, &mut tr.rng_actor),
        };
        let adv: Vec<f64> = rows.iter().map(|&(src, i)| tables.get(src, i)).collect();
        let w: Vec<f64> = adv
            .iter()
            .map(|&a| awr_weight(a, t.awr_temperature_beta, t.advantage_clipping, t.clip_target))
            .collect();
        let batch = Batch::gather(demo, real, rows);
        let lr = sa.lr(s);
        let (loss, norm) = tr.actor_step(&batch, Some(&w), lr)?;
        let critic = if s % period == 0 {
            let rows = match stage {
                Stage::Hitl => hybrid_rows(demo.len(), n_real, t.batch_size, &mut tr.rng_critic),
                _ => uniform_rows(demo.len(), t.batch_size, Source::Demo, &mut tr.rng_critic),
            };
            let cb = Batch::gather(demo, real, rows);
            Some(tr.critic_step(&cb, sc.lr(s / period))?)
        } else {
            None
        };
        let (adv_mean, adv_std) = mean_std(&adv);
        tr.metrics.push(MetricRow {
            stage,
            actor_step: tr.actor_steps,
            lr_actor: lr,
            actor_loss: loss,
            grad_norm: norm,
            critic,
            adv_mean,
            adv_std,
            weight_mean: mean_std(&w).0,
        });
    }
    Ok(())
}
