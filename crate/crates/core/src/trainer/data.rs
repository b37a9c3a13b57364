use ndarray::Array2;
use rand::Rng;

use crate::critic::CriticTargets;
use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::policy::FeatureLayout;

/// Where a transition of a training batch came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Demo,
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpan {
    pub start: usize,
    pub len: usize,
}

/// Flattened annotated transitions with cached encoder inputs.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub input_dim: usize,
    pub action_len: usize,
    pub chunk: usize,
    x: Vec<f64>,
    actions: Vec<f64>,
    pub y_traj: Vec<f64>,
    pub y_sub: Vec<f64>,
    pub y_int: Vec<f64>,
    pub r: Vec<f64>,
    pub episode_of: Vec<usize>,
    pub step_of: Vec<usize>,
    pub episodes: Vec<EpisodeSpan>,
    pub intervention: Vec<bool>,
}

impl Dataset {
    pub fn new(layout: &FeatureLayout, chunk: usize) -> Self {
        Self {
            input_dim: layout.dim(),
            action_len: chunk * 3,
            chunk,
            ..Default::default()
        }
    }

    pub fn from_episodes(episodes: &[Episode], layout: &FeatureLayout, chunk: usize) -> Result<Self> {
        let mut d = Self::new(layout, chunk);
        for e in episodes {
            d.push_episode(e, layout)?;
        }
        Ok(d)
    }

    pub fn push_episode(&mut self, ep: &Episode, layout: &FeatureLayout) -> Result<()> {
        ep.validate()?;
        let a = ep.annotation()?;
        let start = self.len();
        let e = self.episodes.len();
        for (t, s) in ep.steps.iter().enumerate() {
            let x = layout.encode(&s.observation)?;
            if x.len() != self.input_dim {
                return Err(Error::Shape("encoded observation has the wrong width".into()));
            }
            self.x.extend(x);
            self.actions.extend(ep.action_chunk(t, self.chunk));
            self.y_traj.push(a.y_traj[t]);
            self.y_sub.push(a.y_sub[t]);
            self.y_int.push(if a.interaction[t] { 1.0 } else { 0.0 });
            self.r.push(a.r[t]);
            self.episode_of.push(e);
            self.step_of.push(t);
            self.intervention.push(s.intervention);
        }
        self.episodes.push(EpisodeSpan { start, len: ep.len() });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn input_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn action_row(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_len..(i + 1) * self.action_len]
    }

    /// Encoder inputs for rows `lo..hi`.
    pub fn inputs(&self, lo: usize, hi: usize) -> Array2<f64> {
        Array2::from_shape_vec((hi - lo, self.input_dim), self.x[lo * self.input_dim..hi * self.input_dim].to_vec())
            .expect("row-major slice")
    }
}

/// Gathered training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Array2<f64>,
    pub a: Array2<f64>,
    pub targets: CriticTargets,
    pub rows: Vec<(Source, usize)>,
}

impl Batch {
    pub fn gather(demo: &Dataset, real: Option<&Dataset>, rows: Vec<(Source, usize)>) -> Self {
        let b = rows.len();
        let mut x = Array2::zeros((b, demo.input_dim));
        let mut a = Array2::zeros((b, demo.action_len));
        let mut targets = CriticTargets::default();
        for (i, &(src, j)) in rows.iter().enumerate() {
            let d = match src {
                Source::Demo => demo,
                Source::Real => real.expect("real rows need a real buffer"),
            };
            x.row_mut(i).assign(&ndarray::ArrayView1::from(d.input_row(j)));
            a.row_mut(i).assign(&ndarray::ArrayView1::from(d.action_row(j)));
            targets.y_traj.push(d.y_traj[j]);
            targets.y_sub.push(d.y_sub[j]);
            targets.y_int.push(d.y_int[j]);
        }
        Self { x, a, targets, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Uniform rows from one buffer.
pub fn uniform_rows<R: Rng + ?Sized>(n: usize, batch: usize, src: Source, rng: &mut R) -> Vec<(Source, usize)> {
    (0..batch).map(|_| (src, rng.random_range(0..n))).collect()
}

/// Half demo and half real rows (an odd batch gives demo the extra row). An
/// empty real buffer falls back to an all-demo batch.
pub fn hybrid_rows<R: Rng + ?Sized>(n_demo: usize, n_real: usize, batch: usize, rng: &mut R) -> Vec<(Source, usize)> {
    if n_real == 0 {
        log::warn!("real buffer is empty; sampling demonstrations only");
        return uniform_rows(n_demo, batch, Source::Demo, rng);
    }
    let nd = batch.div_ceil(2);
    let mut rows = uniform_rows(n_demo, nd, Source::Demo, rng);
    rows.extend(uniform_rows(n_real, batch - nd, Source::Real, rng));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hybrid_split_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let count = |rows: &[(Source, usize)], s| rows.iter().filter(|r| r.0 == s).count();
        let r = hybrid_rows(100, 50, 64, &mut rng);
        assert_eq!((count(&r, Source::Demo), count(&r, Source::Real)), (32, 32));
        let r = hybrid_rows(100, 50, 7, &mut rng);
        assert_eq!((count(&r, Source::Demo), count(&r, Source::Real)), (4, 3));
        let r = hybrid_rows(100, 0, 7, &mut rng);
        assert_eq!(count(&r, Source::Demo), 7);
        assert!(r.iter().all(|&(_, i)| i < 100));
    }

    #[test]
    fn hybrid_rows_are_seeded() {
        let a = hybrid_rows(100, 50, 64, &mut ChaCha8Rng::seed_from_u64(5));
        let b = hybrid_rows(100, 50, 64, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
