//! Deterministic 2-D tabletop simulator with long-horizon tasks, a raster
//! renderer that also reports the robot's pixel mask, and a scripted expert.

mod expert;
mod render;
mod task;
mod world;

pub use expert::{expert_action, noisy_expert_action};
pub use render::{gripper_sprite, render, square_pixels, Image, Mask, BACKGROUND, GRIPPER};
pub use task::{
    Color, ExpertRoutine, ObjectSpec, Predicate, SiteSpec, SpawnRegion, SubtaskSpec, SuccessPredicate,
    TaskSpec,
};
pub use world::{dist, ActionRow, Anchor, Env, ObjectState, Observation, StepOutcome, WorldState, ACTION_DIM};
