use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render, Image, Mask};
use super::task::{Predicate, TaskSpec};
use crate::config::SimConfig;
use crate::error::{Error, Result};

/// Action dimension: gripper dx, dy and the open/close command.
pub const ACTION_DIM: usize = 3;

/// One control step: `[dx, dy, grip]`; `grip > 0` closes the gripper.
pub type ActionRow = [f64; ACTION_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum Anchor {
    Object(usize),
    Site(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: usize,
    pub pos: [f64; 2],
    /// Where the object was snapped after a successful placement.
    pub placed_on: Option<Anchor>,
}

impl ObjectState {
    pub fn placed(&self) -> bool {
        self.placed_on.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper_pos: [f64; 2],
    pub gripper_closed: bool,
    pub held_object: Option<usize>,
    pub objects: Vec<ObjectState>,
    pub subtask_index: usize,
    pub step_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub image: Image,
    /// `[x / world_size, y / world_size, closed]`
    pub proprio: [f64; 3],
    pub task_id: usize,
    pub subtask_index: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: WorldState,
    pub observation: Observation,
    pub mask: Mask,
    pub done: bool,
    pub success: bool,
    /// Simulator truth: an object was carried during the step or got displaced by it.
    pub interaction_truth: bool,
    /// Subtask completed by this step, if any.
    pub completed_subtask: Option<usize>,
}

/// A task instance bound to simulator settings. All operations are pure
/// functions of their inputs.
#[derive(Debug, Clone)]
pub struct Env {
    pub task: TaskSpec,
    pub cfg: SimConfig,
}

impl Env {
    pub fn new(task: TaskSpec, cfg: SimConfig) -> Result<Self> {
        task.validate()?;
        Ok(Self { task, cfg })
    }

    /// Looks a task up by name among `tasks`.
    pub fn by_name(tasks: &[TaskSpec], name: &str, cfg: SimConfig) -> Result<Self> {
        let task = tasks
            .iter()
            .find(|t| t.name == name)
            .cloned()
            .ok_or_else(|| Error::Config(format!("unknown task `{name}`")))?;
        Self::new(task, cfg)
    }

    pub fn max_steps(&self) -> usize {
        self.cfg.max_episode_steps.unwrap_or(self.task.max_episode_steps)
    }

    pub fn n_subtasks(&self) -> usize {
        self.task.subtasks.len()
    }

    pub fn reset(&self, seed: u64) -> (WorldState, Observation, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample = |r: &super::task::SpawnRegion, rng: &mut ChaCha8Rng| -> [f64; 2] {
            [
                rng.random_range(r.min[0]..=r.max[0]),
                rng.random_range(r.min[1]..=r.max[1]),
            ]
        };
        let gripper_pos = sample(&self.task.gripper_spawn, &mut rng);
        let mut objects: Vec<ObjectState> = Vec::with_capacity(self.task.objects.len());
        for (id, spec) in self.task.objects.iter().enumerate() {
            // Rejection sampling; after many misses accept the last draw.
            let mut pos = sample(&spec.spawn, &mut rng);
            for _ in 0..200 {
                let clear = objects
                    .iter()
                    .all(|o| dist(o.pos, pos) >= self.task.min_separation)
                    && self.task.sites.iter().all(|s| dist(s.pos, pos) >= self.task.min_separation);
                if clear {
                    break;
                }
                pos = sample(&spec.spawn, &mut rng);
            }
            objects.push(ObjectState {
                id,
                pos,
                placed_on: None,
            });
        }
        let state = WorldState {
            gripper_pos,
            gripper_closed: false,
            held_object: None,
            objects,
            subtask_index: 0,
            step_count: 0,
        };
        let (obs, mask) = self.observe(&state);
        (state, obs, mask)
    }

    pub fn observe(&self, state: &WorldState) -> (Observation, Mask) {
        let (image, mask) = render(self, state);
        let obs = Observation {
            image,
            proprio: [
                state.gripper_pos[0] / self.cfg.world_size,
                state.gripper_pos[1] / self.cfg.world_size,
                if state.gripper_closed { 1.0 } else { 0.0 },
            ],
            task_id: self.task.task_id,
            subtask_index: state.subtask_index,
        };
        (obs, mask)
    }

    pub fn is_success(&self, state: &WorldState) -> bool {
        state.subtask_index >= self.n_subtasks()
    }

    pub fn is_done(&self, state: &WorldState) -> bool {
        self.is_success(state) || state.step_count >= self.max_steps()
    }

    pub fn anchor_pos(&self, state: &WorldState, anchor: Anchor) -> [f64; 2] {
        match anchor {
            Anchor::Object(i) => state.objects[i].pos,
            Anchor::Site(i) => self.task.sites[i].pos,
        }
    }

    pub fn resolve_target(&self, name: &str) -> Option<Anchor> {
        self.task
            .object_index(name)
            .map(Anchor::Object)
            .or_else(|| self.task.site_index(name).map(Anchor::Site))
    }

    pub fn graspable(&self, state: &WorldState, id: usize) -> bool {
        self.task.objects[id].graspable && !state.objects[id].placed()
    }

    /// Evaluates the predicate of subtask `k` on `state`.
    pub fn predicate_holds(&self, state: &WorldState, k: usize) -> bool {
        match &self.task.subtasks[k].predicate {
            Predicate::Holding { object } => {
                state.held_object == self.task.object_index(object)
            }
            Predicate::PlacedOn { object, target } => {
                let (Some(o), Some(t)) = (self.task.object_index(object), self.resolve_target(target))
                else {
                    return false;
                };
                state.held_object != Some(o) && state.objects[o].placed_on == Some(t)
            }
        }
    }

    pub fn step(&self, state: &WorldState, action: &ActionRow) -> Result<StepOutcome> {
        if self.is_done(state) {
            return Err(Error::Usage("step called on a finished episode".into()));
        }
        let mut next = state.clone();
        let before: Vec<[f64; 2]> = state.objects.iter().map(|o| o.pos).collect();
        let carried = state.held_object.is_some();

        let clamp = |v: f64| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 };
        let mut delta = [
            clamp(action[0]) * self.cfg.max_speed,
            clamp(action[1]) * self.cfg.max_speed,
        ];
        for (d, p) in delta.iter_mut().zip(next.gripper_pos) {
            let target = (p + *d).clamp(0.0, self.cfg.world_size);
            *d = target - p;
        }
        next.gripper_pos[0] += delta[0];
        next.gripper_pos[1] += delta[1];
        if let Some(h) = next.held_object {
            move_tree(&mut next.objects, h, delta);
        }

        let close = action[2] > 0.0;
        if close && !next.gripper_closed {
            next.gripper_closed = true;
            next.held_object = self.grasp_candidate(&next);
        } else if !close && next.gripper_closed {
            next.gripper_closed = false;
            if let Some(h) = next.held_object.take() {
                self.release(&mut next, h);
            }
        }

        let mut completed_subtask = None;
        if next.subtask_index < self.n_subtasks() && self.predicate_holds(&next, next.subtask_index) {
            completed_subtask = Some(next.subtask_index);
            next.subtask_index += 1;
        }
        next.step_count += 1;

        let displaced = next
            .objects
            .iter()
            .zip(&before)
            .any(|(o, b)| o.pos != *b);
        let (observation, mask) = self.observe(&next);
        let success = self.is_success(&next);
        let done = self.is_done(&next);
        Ok(StepOutcome {
            state: next,
            observation,
            mask,
            done,
            success,
            interaction_truth: carried || displaced,
            completed_subtask,
        })
    }

    fn grasp_candidate(&self, state: &WorldState) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for o in &state.objects {
            if !self.graspable(state, o.id) {
                continue;
            }
            let d = dist(o.pos, state.gripper_pos);
            if d <= self.cfg.grasp_radius && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, o.id));
            }
        }
        best.map(|(_, id)| id)
    }

    /// Releases `held`; it snaps onto its target when the pending subtask is
    /// its placement and it lies within tolerance, otherwise it stays put.
    fn release(&self, state: &mut WorldState, held: usize) {
        let Some(sub) = self.task.subtasks.get(state.subtask_index) else {
            return;
        };
        let Predicate::PlacedOn { object, target } = &sub.predicate else {
            return;
        };
        if self.task.object_index(object) != Some(held) {
            return;
        }
        let Some(anchor) = self.resolve_target(target) else {
            return;
        };
        let goal = self.anchor_pos(state, anchor);
        if dist(state.objects[held].pos, goal) <= self.cfg.place_tolerance {
            let pos = state.objects[held].pos;
            move_tree(&mut state.objects, held, [goal[0] - pos[0], goal[1] - pos[1]]);
            state.objects[held].placed_on = Some(anchor);
        }
    }

    /// Pixels per world unit.
    pub fn scale(&self) -> f64 {
        self.cfg.image_size as f64 / self.cfg.world_size
    }
}

/// Moves `root` and everything placed on it (transitively) by `delta`.
fn move_tree(objects: &mut [ObjectState], root: usize, delta: [f64; 2]) {
    let mut stack = vec![root];
    let mut seen = vec![false; objects.len()];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        objects[i].pos[0] += delta[0];
        objects[i].pos[1] += delta[1];
        for o in objects.iter() {
            if o.placed_on == Some(Anchor::Object(i)) {
                stack.push(o.id);
            }
        }
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(task: TaskSpec) -> Env {
        Env::new(task, SimConfig::default()).unwrap()
    }

    #[test]
    fn reset_is_deterministic_and_seed_sensitive() {
        let e = env(TaskSpec::blockstack4());
        let (s1, o1, _) = e.reset(7);
        let (s2, o2, _) = e.reset(7);
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
        let (s3, o3, _) = e.reset(8);
        assert_ne!(s1.objects[1].pos, s3.objects[1].pos);
        assert_ne!(o1.image, o3.image);
        assert_eq!((s1.subtask_index, s1.step_count), (0, 0));
    }

    #[test]
    fn identity_action_only_advances_the_clock() {
        let e = env(TaskSpec::blockstack4());
        let (s, _, _) = e.reset(3);
        let out = e.step(&s, &[0.0, 0.0, -1.0]).unwrap();
        let mut expect = s.clone();
        expect.step_count += 1;
        assert_eq!(out.state, expect);
        assert!(!out.interaction_truth);
    }

    #[test]
    fn closing_near_a_block_grasps_it() {
        let e = env(TaskSpec::blockstack4());
        let (mut s, _, _) = e.reset(1);
        let red = e.task.object_index("red").unwrap();
        // 1.9 units away: inside the 2-unit grasp radius.
        s.gripper_pos = [s.objects[red].pos[0] + 1.9, s.objects[red].pos[1]];
        let out = e.step(&s, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.state.held_object, Some(red));
        assert_eq!(out.completed_subtask, Some(0));
        assert_eq!(out.state.subtask_index, 1);

        s.gripper_pos = [s.objects[red].pos[0] + 2.1, s.objects[red].pos[1]];
        let out = e.step(&s, &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.state.held_object, None);
        assert!(out.state.gripper_closed);
    }

    #[test]
    fn held_objects_move_rigidly() {
        let e = env(TaskSpec::blockstack4());
        let (mut s, _, _) = e.reset(2);
        let red = e.task.object_index("red").unwrap();
        s.gripper_pos = s.objects[red].pos;
        let s = e.step(&s, &[0.0, 0.0, 1.0]).unwrap().state;
        let before = s.objects[red].pos;
        let out = e.step(&s, &[0.5, -1.0, 1.0]).unwrap();
        let after = out.state.objects[red].pos;
        assert!((after[0] - before[0] - 0.5).abs() < 1e-12);
        assert!((after[1] - before[1] + 1.0).abs() < 1e-12);
        assert!(out.interaction_truth);
    }

    #[test]
    fn release_within_tolerance_snaps_to_target() {
        let e = env(TaskSpec::blockstack4());
        let (mut s, _, _) = e.reset(4);
        let red = e.task.object_index("red").unwrap();
        let plate = e.task.object_index("plate").unwrap();
        s.gripper_pos = s.objects[red].pos;
        s = e.step(&s, &[0.0, 0.0, 1.0]).unwrap().state;
        let goal = s.objects[plate].pos;
        let off = [goal[0] + 1.2 - s.objects[red].pos[0], goal[1] - s.objects[red].pos[1]];
        s.objects[red].pos = [goal[0] + 1.2, goal[1]];
        s.gripper_pos = [s.gripper_pos[0] + off[0], s.gripper_pos[1] + off[1]];
        let out = e.step(&s, &[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(out.state.objects[red].pos, goal);
        assert_eq!(out.state.objects[red].placed_on, Some(Anchor::Object(plate)));
        assert_eq!(out.state.subtask_index, 2);
        assert!(out.interaction_truth);
    }

    #[test]
    fn release_out_of_order_drops_in_place() {
        let e = env(TaskSpec::blockstack4());
        let (mut s, _, _) = e.reset(5);
        let yellow = e.task.object_index("yellow").unwrap();
        let plate = e.task.object_index("plate").unwrap();
        s.gripper_pos = s.objects[yellow].pos;
        s = e.step(&s, &[0.0, 0.0, 1.0]).unwrap().state;
        assert_eq!(s.subtask_index, 0);
        let goal = s.objects[plate].pos;
        s.objects[yellow].pos = goal;
        s.gripper_pos = goal;
        let out = e.step(&s, &[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(out.state.objects[yellow].placed_on, None);
        assert_eq!(out.state.subtask_index, 0);
    }

    #[test]
    fn completing_the_last_subtask_ends_the_episode() {
        let e = env(TaskSpec::pack2());
        let (mut s, _, _) = e.reset(0);
        let lid = e.task.object_index("lid").unwrap();
        let bx = e.task.object_index("box").unwrap();
        s.subtask_index = 4;
        s.objects[bx].placed_on = Some(Anchor::Site(0));
        s.objects[bx].pos = e.task.sites[0].pos;
        s.held_object = Some(lid);
        s.gripper_closed = true;
        s.objects[lid].pos = s.objects[bx].pos;
        s.gripper_pos = s.objects[bx].pos;
        let out = e.step(&s, &[0.0, 0.0, -1.0]).unwrap();
        assert!(out.done && out.success);
        assert!(matches!(e.step(&out.state, &[0.0; 3]), Err(Error::Usage(_))));
    }

    #[test]
    fn step_limit_ends_the_episode() {
        let mut cfg = SimConfig::default();
        cfg.max_episode_steps = Some(3);
        let e = Env::new(TaskSpec::blockstack4(), cfg).unwrap();
        let (mut s, _, _) = e.reset(0);
        for i in 0..3 {
            let out = e.step(&s, &[0.1, 0.0, -1.0]).unwrap();
            assert_eq!(out.done, i == 2);
            assert!(!out.success);
            s = out.state;
        }
    }

    #[test]
    fn carrying_the_box_carries_its_contents() {
        let e = env(TaskSpec::pack2());
        let (mut s, _, _) = e.reset(9);
        let item = e.task.object_index("item").unwrap();
        let bx = e.task.object_index("box").unwrap();
        s.objects[item].placed_on = Some(Anchor::Object(bx));
        s.objects[item].pos = s.objects[bx].pos;
        s.subtask_index = 2;
        s.gripper_pos = s.objects[bx].pos;
        s = e.step(&s, &[0.0, 0.0, 1.0]).unwrap().state;
        assert_eq!(s.held_object, Some(bx));
        let out = e.step(&s, &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(out.state.objects[item].pos, out.state.objects[bx].pos);
    }
}
