//! Recorded episodes and their annotation with interaction labels, rewards
//! and value targets. Demonstrations and rollouts share this one schema.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::interaction::label_frames;
use crate::reward::{hybrid_trace, subtask_weights, RewardSpec};
use crate::sim::{ActionRow, Env, Image, Mask, Observation, StepOutcome, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionSource {
    Scripted,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionTrigger {
    Stagnation,
    Manual,
}

/// A contiguous span of steps `[start, end)` driven by an intervention source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub start: usize,
    pub end: usize,
    pub source: InterventionSource,
    pub trigger: InterventionTrigger,
}

/// Critic readings captured online while the episode ran.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticReading {
    pub value: f64,
    pub ref_value: f64,
    pub p_int: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Observation,
    pub mask: Mask,
    pub action: ActionRow,
    pub intervention: bool,
    /// Simulator truth for this transition.
    pub interaction_truth: bool,
    pub completed_subtask: Option<usize>,
    pub critic: Option<CriticReading>,
}

/// Per-episode annotation. Per-frame vectors have `T + 1` entries (the final
/// observation included); per-transition vectors have `T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub interaction: Vec<bool>,
    pub r_traj: Vec<f64>,
    pub r_sub: Vec<f64>,
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub y_traj: Vec<f64>,
    pub y_sub: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: String,
    pub task_id: usize,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub final_observation: Observation,
    pub final_mask: Mask,
    pub success: bool,
    pub interventions: Vec<InterventionRecord>,
    pub annotation: Option<Annotation>,
}

impl Episode {
    /// Starts recording from a reset observation.
    pub fn begin(env: &Env, seed: u64, obs: Observation, mask: Mask) -> Self {
        Self {
            task: env.task.name.clone(),
            task_id: env.task.task_id,
            seed,
            steps: Vec::new(),
            final_observation: obs,
            final_mask: mask,
            success: false,
            interventions: Vec::new(),
            annotation: None,
        }
    }

    /// Appends a transition taken from the current final observation.
    pub fn push(&mut self, action: ActionRow, intervention: bool, critic: Option<CriticReading>, out: &StepOutcome) {
        let observation = std::mem::replace(&mut self.final_observation, out.observation.clone());
        let mask = std::mem::replace(&mut self.final_mask, out.mask.clone());
        self.steps.push(Step {
            observation,
            mask,
            action,
            intervention,
            interaction_truth: out.interaction_truth,
            completed_subtask: out.completed_subtask,
            critic,
        });
        self.success = out.success;
        self.annotation = None;
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn frames(&self) -> Vec<Image> {
        self.steps
            .iter()
            .map(|s| s.observation.image.clone())
            .chain(std::iter::once(self.final_observation.image.clone()))
            .collect()
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.steps
            .iter()
            .map(|s| s.mask.clone())
            .chain(std::iter::once(self.final_mask.clone()))
            .collect()
    }

    pub fn observation(&self, t: usize) -> &Observation {
        if t < self.steps.len() {
            &self.steps[t].observation
        } else {
            &self.final_observation
        }
    }

    /// Transition index at which each of the `k` subtasks completed.
    pub fn completions(&self, k: usize) -> Vec<Option<usize>> {
        let mut c = vec![None; k];
        for (t, s) in self.steps.iter().enumerate() {
            if let Some(i) = s.completed_subtask {
                if i < k {
                    c[i] = Some(t);
                }
            }
        }
        c
    }

    /// Subtasks completed, as counted by the last observation.
    pub fn subtasks_completed(&self) -> usize {
        self.final_observation.subtask_index
    }

    pub fn intervention_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.intervention).count()
    }

    /// Action chunk starting at step `t`, padded past the end with a
    /// motionless action that keeps the last gripper command.
    pub fn action_chunk(&self, t: usize, h: usize) -> Vec<f64> {
        let last_grip = self.steps.last().map_or(-1.0, |s| s.action[2]);
        let mut out = Vec::with_capacity(h * 3);
        for i in t..t + h {
            match self.steps.get(i) {
                Some(s) => out.extend_from_slice(&s.action),
                None => out.extend_from_slice(&[0.0, 0.0, last_grip]),
            }
        }
        out
    }

    /// Adds interaction labels, rewards, returns and value targets. Rerunning
    /// on an annotated episode reproduces the same annotation.
    pub fn annotate(&mut self, cfg: &Config, task: &TaskSpec) -> Result<()> {
        if task.name != self.task {
            return Err(Error::Annotation(format!(
                "episode of `{}` annotated with task `{}`",
                self.task, task.name
            )));
        }
        if self.steps.is_empty() {
            return Err(Error::Annotation("episode has no transitions".into()));
        }
        let k = task.n_subtasks();
        if self.success != (self.subtasks_completed() == k) {
            return Err(Error::Annotation(
                "success flag disagrees with the completed subtasks".into(),
            ));
        }
        let interaction = label_frames(&self.frames(), &self.masks(), &cfg.interaction)?;
        let spec = RewardSpec::for_episode(
            &self.completions(k),
            self.len(),
            subtask_weights(task, &cfg.reward)?,
            &cfg.reward,
        )?;
        let tr = hybrid_trace(self.len(), self.success, &spec)?;
        self.annotation = Some(Annotation {
            interaction,
            r_traj: tr.r_traj,
            r_sub: tr.r_sub,
            r: tr.r,
            g: tr.g,
            y_traj: tr.y_traj,
            y_sub: tr.y_sub,
        });
        Ok(())
    }

    pub fn annotation(&self) -> Result<&Annotation> {
        self.annotation
            .as_ref()
            .ok_or_else(|| Error::Annotation(format!("episode {} of `{}` is not annotated", self.seed, self.task)))
    }

    /// Structural checks shared by demonstrations and rollouts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Schema(format!("episode {} of `{}`: {m}", self.seed, self.task)));
        let t = self.len();
        if t == 0 {
            return bad("no transitions".into());
        }
        let dims = &self.final_observation.image;
        let mut prev_sub = 0;
        for (i, s) in self.steps.iter().enumerate() {
            let o = &s.observation;
            if !o.image.same_dims(dims) || s.mask.width != dims.width || s.mask.height != dims.height {
                return bad(format!("step {i} has inconsistent frame dimensions"));
            }
            if o.task_id != self.task_id {
                return bad(format!("step {i} carries task id {}", o.task_id));
            }
            if o.subtask_index < prev_sub {
                return bad(format!("subtask index decreases at step {i}"));
            }
            prev_sub = o.subtask_index;
            if s.action.iter().any(|a| !a.is_finite() || a.abs() > 1.0) {
                return bad(format!("step {i} has an action outside [-1, 1]"));
            }
        }
        if self.final_observation.subtask_index < prev_sub {
            return bad("subtask index decreases at the final frame".into());
        }
        let mut last_end = 0;
        for r in &self.interventions {
            if !(r.start < r.end && r.end <= t) || r.start < last_end {
                return bad(format!("invalid intervention span {}..{}", r.start, r.end));
            }
            last_end = r.end;
        }
        for (i, s) in self.steps.iter().enumerate() {
            let inside = self.interventions.iter().any(|r| (r.start..r.end).contains(&i));
            if inside != s.intervention {
                return bad(format!("intervention flag at step {i} disagrees with the records"));
            }
        }
        if let Some(a) = &self.annotation {
            let frames_ok = [a.interaction.len(), a.g.len(), a.y_traj.len(), a.y_sub.len()]
                .iter()
                .all(|&n| n == t + 1);
            let steps_ok = [a.r_traj.len(), a.r_sub.len(), a.r.len()].iter().all(|&n| n == t);
            if !frames_ok || !steps_ok {
                return bad("annotation lengths do not match the episode".into());
            }
            let finite = [&a.r_traj, &a.r_sub, &a.r, &a.g, &a.y_traj, &a.y_sub]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
            if !finite || a.g[t] != 0.0 {
                return bad("annotation values are not finite or the terminal return is not zero".into());
            }
        }
        Ok(())
    }
}
