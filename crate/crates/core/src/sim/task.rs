use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Render colors; each is an 8-bit RGB triple so frames survive PNG round trips exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Yellow,
    Green,
    Blue,
    Gray,
    Purple,
    Brown,
    Tan,
    Sky,
}

impl Color {
    pub const ALL: [Color; 9] = [
        Color::Red,
        Color::Yellow,
        Color::Green,
        Color::Blue,
        Color::Gray,
        Color::Purple,
        Color::Brown,
        Color::Tan,
        Color::Sky,
    ];

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Yellow => [230, 200, 30],
            Color::Green => [40, 170, 60],
            Color::Blue => [40, 80, 220],
            Color::Gray => [150, 150, 150],
            Color::Purple => [140, 60, 180],
            Color::Brown => [150, 100, 50],
            Color::Tan => [210, 170, 110],
            Color::Sky => [170, 210, 230],
        }
    }
}

/// Axis-aligned box objects are spawned in, uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnRegion {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    pub color: Color,
    pub half_size: f64,
    pub graspable: bool,
    pub spawn: SpawnRegion,
}

/// A fixed location in the world, drawn beneath all objects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub name: String,
    pub pos: [f64; 2],
    pub half_size: f64,
    pub color: Color,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    /// The gripper holds `object`.
    Holding { object: String },
    /// `object` was released onto `target` (an object or a site) and snapped there.
    PlacedOn { object: String, target: String },
}

impl Predicate {
    pub fn object(&self) -> &str {
        match self {
            Predicate::Holding { object } | Predicate::PlacedOn { object, .. } => object,
        }
    }
}

/// Scripted routine the expert runs while a subtask is pending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertRoutine {
    Grasp,
    Carry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskSpec {
    pub name: String,
    pub predicate: Predicate,
    pub expert: ExpertRoutine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessPredicate {
    AllSubtasks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub task_id: usize,
    pub max_episode_steps: usize,
    pub gripper_spawn: SpawnRegion,
    /// Minimum spacing between spawned object centers.
    pub min_separation: f64,
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub sites: Vec<SiteSpec>,
    pub subtasks: Vec<SubtaskSpec>,
    pub success: SuccessPredicate,
}

impl TaskSpec {
    pub fn builtin() -> Vec<TaskSpec> {
        vec![Self::blockstack4(), Self::pack2()]
    }

    /// Stack red, yellow, green and blue blocks on a plate, in that order.
    pub fn blockstack4() -> TaskSpec {
        let block = |name: &str, color| ObjectSpec {
            name: name.into(),
            color,
            half_size: 1.5,
            graspable: true,
            spawn: SpawnRegion {
                min: [4.0, 4.0],
                max: [14.0, 28.0],
            },
        };
        let mut subtasks = Vec::new();
        let order = ["red", "yellow", "green", "blue"];
        for (i, name) in order.iter().enumerate() {
            let target = if i == 0 { "plate" } else { order[i - 1] };
            subtasks.push(SubtaskSpec {
                name: format!("pick {name}"),
                predicate: Predicate::Holding {
                    object: (*name).into(),
                },
                expert: ExpertRoutine::Grasp,
            });
            subtasks.push(SubtaskSpec {
                name: format!("place {name} on {target}"),
                predicate: Predicate::PlacedOn {
                    object: (*name).into(),
                    target: target.into(),
                },
                expert: ExpertRoutine::Carry,
            });
        }
        TaskSpec {
            name: "blockstack-4".into(),
            task_id: 0,
            max_episode_steps: 400,
            gripper_spawn: SpawnRegion {
                min: [14.0, 14.0],
                max: [18.0, 18.0],
            },
            min_separation: 4.5,
            objects: vec![
                ObjectSpec {
                    name: "plate".into(),
                    color: Color::Gray,
                    half_size: 2.5,
                    graspable: false,
                    spawn: SpawnRegion {
                        min: [22.0, 6.0],
                        max: [28.0, 26.0],
                    },
                },
                block("red", Color::Red),
                block("yellow", Color::Yellow),
                block("green", Color::Green),
                block("blue", Color::Blue),
            ],
            sites: Vec::new(),
            subtasks,
            success: SuccessPredicate::AllSubtasks,
        }
    }

    /// Put an item into a box, slide the box to the center mark and close the lid.
    pub fn pack2() -> TaskSpec {
        let sub = |name: &str, predicate, expert| SubtaskSpec {
            name: name.into(),
            predicate,
            expert,
        };
        let holding = |o: &str| Predicate::Holding { object: o.into() };
        let placed = |o: &str, t: &str| Predicate::PlacedOn {
            object: o.into(),
            target: t.into(),
        };
        TaskSpec {
            name: "pack-2".into(),
            task_id: 1,
            max_episode_steps: 400,
            gripper_spawn: SpawnRegion {
                min: [14.0, 14.0],
                max: [18.0, 18.0],
            },
            min_separation: 5.0,
            objects: vec![
                ObjectSpec {
                    name: "item".into(),
                    color: Color::Purple,
                    half_size: 1.0,
                    graspable: true,
                    spawn: SpawnRegion {
                        min: [4.0, 4.0],
                        max: [11.0, 28.0],
                    },
                },
                ObjectSpec {
                    name: "box".into(),
                    color: Color::Brown,
                    half_size: 3.0,
                    graspable: true,
                    spawn: SpawnRegion {
                        min: [23.0, 5.0],
                        max: [28.0, 27.0],
                    },
                },
                ObjectSpec {
                    name: "lid".into(),
                    color: Color::Tan,
                    half_size: 3.0,
                    graspable: true,
                    spawn: SpawnRegion {
                        min: [5.0, 5.0],
                        max: [11.0, 27.0],
                    },
                },
            ],
            sites: vec![SiteSpec {
                name: "center".into(),
                pos: [16.0, 16.0],
                half_size: 3.5,
                color: Color::Sky,
            }],
            subtasks: vec![
                sub("pick item", holding("item"), ExpertRoutine::Grasp),
                sub("place item in box", placed("item", "box"), ExpertRoutine::Carry),
                sub("slide box to center", placed("box", "center"), ExpertRoutine::Carry),
                sub("pick lid", holding("lid"), ExpertRoutine::Grasp),
                sub("close lid", placed("lid", "box"), ExpertRoutine::Carry),
            ],
            success: SuccessPredicate::AllSubtasks,
        }
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o.name == name)
    }

    pub fn site_index(&self, name: &str) -> Option<usize> {
        self.sites.iter().position(|s| s.name == name)
    }

    pub fn n_subtasks(&self) -> usize {
        self.subtasks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("task `{}`: {msg}", self.name)));
        if self.subtasks.len() < 2 {
            return bad("needs at least two subtasks".into());
        }
        if self.max_episode_steps == 0 {
            return bad("max_episode_steps must be > 0".into());
        }
        for st in &self.subtasks {
            let obj = st.predicate.object();
            let Some(oi) = self.object_index(obj) else {
                return bad(format!("subtask `{}` names unknown object `{obj}`", st.name));
            };
            if !self.objects[oi].graspable {
                return bad(format!("subtask `{}` manipulates a fixture", st.name));
            }
            if let Predicate::PlacedOn { target, .. } = &st.predicate {
                if self.object_index(target).is_none() && self.site_index(target).is_none() {
                    return bad(format!("subtask `{}` names unknown target `{target}`", st.name));
                }
            }
            let routine_ok = matches!(
                (&st.predicate, st.expert),
                (Predicate::Holding { .. }, ExpertRoutine::Grasp)
                    | (Predicate::PlacedOn { .. }, ExpertRoutine::Carry)
            );
            if !routine_ok {
                return bad(format!("subtask `{}` pairs predicate and routine inconsistently", st.name));
            }
        }
        for o in &self.objects {
            if !(o.half_size > 0.0) || o.spawn.min[0] > o.spawn.max[0] || o.spawn.min[1] > o.spawn.max[1]
            {
                return bad(format!("object `{}` has an invalid geometry", o.name));
            }
        }
        Ok(())
    }
}
