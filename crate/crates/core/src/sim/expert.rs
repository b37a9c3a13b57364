//! Scripted waypoint-following expert. It stands in for a teleoperator both
//! when generating demonstrations and when taking over a rollout.

use rand::Rng;
use rand_distr::StandardNormal;

use super::task::{ExpertRoutine, Predicate};
use super::world::{dist, ActionRow, Env, WorldState};
use crate::error::{Error, Result};

const OPEN: f64 = -1.0;
const CLOSE: f64 = 1.0;

/// Noise-free expert action for `state`.
pub fn expert_action(env: &Env, state: &WorldState) -> Result<ActionRow> {
    if env.is_done(state) {
        return Err(Error::Usage("expert queried on a finished episode".into()));
    }
    let k = state.subtask_index;
    let sub = &env.task.subtasks[k];
    let obj = env
        .task
        .object_index(sub.predicate.object())
        .ok_or_else(|| Error::Unrecoverable(format!("object of `{}` is missing", sub.name)))?;

    if let Some(h) = state.held_object {
        if h != obj {
            // Put the wrong object down where it is.
            return Ok([0.0, 0.0, OPEN]);
        }
    }
    if state.objects[obj].placed() {
        return Err(Error::Unrecoverable(format!(
            "`{}` is locked in place but subtask `{}` still needs it",
            env.task.objects[obj].name, sub.name
        )));
    }
    match (sub.expert, &sub.predicate) {
        (ExpertRoutine::Carry, Predicate::PlacedOn { target, .. }) if state.held_object == Some(obj) => {
            let anchor = env
                .resolve_target(target)
                .ok_or_else(|| Error::Unrecoverable(format!("unknown target `{target}`")))?;
            let goal = env.anchor_pos(state, anchor);
            let held = state.objects[obj].pos;
            // Aim the gripper so the carried object, not the gripper, lands on the goal.
            let aim = [
                goal[0] - (held[0] - state.gripper_pos[0]),
                goal[1] - (held[1] - state.gripper_pos[1]),
            ];
            Ok(approach(env, state.gripper_pos, aim, CLOSE, OPEN))
        }
        // A closed, empty gripper has to open before it can grasp again.
        _ if state.gripper_closed => Ok(approach(env, state.gripper_pos, state.objects[obj].pos, OPEN, OPEN)),
        _ => Ok(approach(env, state.gripper_pos, state.objects[obj].pos, OPEN, CLOSE)),
    }
}

/// Moves toward `goal` at full speed keeping `grip_en_route`; on the step that
/// reaches the goal it switches to `grip_on_arrival`.
fn approach(env: &Env, from: [f64; 2], goal: [f64; 2], grip_en_route: f64, grip_on_arrival: f64) -> ActionRow {
    let d = [goal[0] - from[0], goal[1] - from[1]];
    let len = dist(from, goal);
    let speed = env.cfg.max_speed;
    if len <= speed {
        [d[0] / speed, d[1] / speed, grip_on_arrival]
    } else {
        [d[0] / len, d[1] / len, grip_en_route]
    }
}

/// Expert action with isotropic Gaussian noise of standard deviation `noise`,
/// clamped to the action bounds. `noise == 0` consumes no randomness.
pub fn noisy_expert_action<R: Rng + ?Sized>(
    env: &Env,
    state: &WorldState,
    noise: f64,
    rng: &mut R,
) -> Result<ActionRow> {
    let mut a = expert_action(env, state)?;
    if noise > 0.0 {
        for x in &mut a {
            let z: f64 = rng.sample(StandardNormal);
            *x = (*x + noise * z).clamp(-1.0, 1.0);
        }
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use crate::sim::TaskSpec;

    fn run_expert(env: &Env, mut s: WorldState) -> (bool, usize) {
        loop {
            let a = expert_action(env, &s).unwrap();
            let out = env.step(&s, &a).unwrap();
            if out.done {
                return (out.success, out.state.step_count);
            }
            s = out.state;
        }
    }

    #[test]
    fn expert_completes_every_task_on_a_hundred_seeds() {
        for task in TaskSpec::builtin() {
            let env = Env::new(task, SimConfig::default()).unwrap();
            for seed in 0..100 {
                let (s, _, _) = env.reset(seed);
                let (ok, steps) = run_expert(&env, s);
                assert!(ok, "{} seed {seed} failed", env.task.name);
                assert!(steps < env.max_steps());
            }
        }
    }

    #[test]
    fn expert_is_deterministic() {
        let env = Env::new(TaskSpec::blockstack4(), SimConfig::default()).unwrap();
        let (s, _, _) = env.reset(3);
        assert_eq!(expert_action(&env, &s).unwrap(), expert_action(&env, &s).unwrap());
        let mut r1 = rand::rng();
        let mut r2 = rand::rng();
        assert_eq!(
            noisy_expert_action(&env, &s, 0.0, &mut r1).unwrap(),
            noisy_expert_action(&env, &s, 0.0, &mut r2).unwrap()
        );
    }

    #[test]
    fn final_subtask_finishes_within_waypoint_tolerance() {
        // Drive to just before the last placement, then count the remaining steps.
        let env = Env::new(TaskSpec::blockstack4(), SimConfig::default()).unwrap();
        let (mut s, _, _) = env.reset(12);
        while s.subtask_index < env.n_subtasks() - 1 {
            let a = expert_action(&env, &s).unwrap();
            s = env.step(&s, &a).unwrap().state;
        }
        let blue = env.task.object_index("blue").unwrap();
        let green = env.task.object_index("green").unwrap();
        let remaining = dist(s.objects[blue].pos, s.objects[green].pos) / env.cfg.max_speed;
        let before = s.step_count;
        let (ok, end) = run_expert(&env, s);
        assert!(ok);
        assert!((end - before) as f64 <= remaining.ceil() + 1.0);
    }

    #[test]
    fn expert_recovers_from_mid_task_perturbations() {
        use rand::SeedableRng;
        let env = Env::new(TaskSpec::pack2(), SimConfig::default()).unwrap();
        for seed in 0..20 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (mut s, _, _) = env.reset(seed);
            for _ in 0..60 {
                let a: ActionRow = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ];
                let out = env.step(&s, &a).unwrap();
                if out.done {
                    break;
                }
                s = out.state;
            }
            if env.is_done(&s) {
                continue;
            }
            let (ok, _) = run_expert(&env, s);
            assert!(ok, "seed {seed}");
        }
    }

    #[test]
    fn locked_object_is_unrecoverable() {
        let env = Env::new(TaskSpec::blockstack4(), SimConfig::default()).unwrap();
        let (mut s, _, _) = env.reset(0);
        s.objects[1].placed_on = Some(crate::sim::Anchor::Site(0));
        assert!(matches!(expert_action(&env, &s), Err(Error::Unrecoverable(_))));
    }
}
