//! Episode logs: one JSON line per record, frames as PNG files beside the
//! log or inline as base64. Floats are written as shortest round-trip
//! decimals so every value reads back bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::episode::{Annotation, CriticReading, Episode, InterventionRecord, Step};
use crate::error::{Error, Result};
use crate::sim::{Image, Mask, Observation};

pub const SCHEMA_VERSION: u32 = 1;

/// How frames are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameMode {
    /// PNG files in a `<stem>.frames` directory next to the log.
    Png,
    /// Base64 PNG bytes inside each record.
    Inline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    /// Relative path for [`FrameMode::Png`], base64 PNG for [`FrameMode::Inline`].
    image: String,
    /// Base64 of the row-major robot mask, 8 pixels per byte.
    mask: String,
    proprio: [f64; 3],
    subtask: usize,
    /// Annotation columns of this frame, when annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<FrameLabels>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct FrameLabels {
    interaction: bool,
    g: f64,
    y_traj: f64,
    y_sub: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct StepRewards {
    r_traj: f64,
    r_sub: f64,
    r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Record {
    Header {
        schema: u32,
        task: String,
        task_id: usize,
        seed: u64,
        length: usize,
        width: usize,
        height: usize,
        annotated: bool,
        frames: FrameMode,
    },
    Step {
        t: usize,
        #[serde(flatten)]
        frame: FrameRecord,
        action: [f64; 3],
        intervention: bool,
        interaction_truth: bool,
        completed_subtask: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        critic: Option<CriticReading>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rewards: Option<StepRewards>,
    },
    Final {
        #[serde(flatten)]
        frame: FrameRecord,
    },
    Footer {
        success: bool,
        length: usize,
        interventions: Vec<InterventionRecord>,
    },
}

fn frames_dir(path: &Path) -> PathBuf {
    path.with_extension("frames")
}

fn tmp_path(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `ep` to `path` atomically: frames and log go to temporaries that
/// are renamed into place once complete.
pub fn write_episode(path: &Path, ep: &Episode, mode: FrameMode) -> Result<()> {
    ep.validate()?;
    let stem = path
        .file_stem()
        .ok_or_else(|| Error::Usage(format!("{} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let final_dir = frames_dir(path);
    let tmp_dir = tmp_path(&final_dir, ".tmp");
    if mode == FrameMode::Png {
        if tmp_dir.exists() {
            fs::remove_dir_all(&tmp_dir)?;
        }
        fs::create_dir_all(&tmp_dir)?;
    }
    let ann = ep.annotation.as_ref();
    let t_len = ep.len();
    let frame = |i: usize, obs: &Observation, mask: &Mask| -> Result<FrameRecord> {
        let png = obs.image.to_png()?;
        let image = match mode {
            FrameMode::Inline => B64.encode(&png),
            FrameMode::Png => {
                let name = format!("{i:06}.png");
                fs::write(tmp_dir.join(&name), &png)?;
                format!("{stem}.frames/{name}")
            }
        };
        Ok(FrameRecord {
            image,
            mask: B64.encode(mask.to_packed()),
            proprio: obs.proprio,
            subtask: obs.subtask_index,
            labels: ann.map(|a| FrameLabels {
                interaction: a.interaction[i],
                g: a.g[i],
                y_traj: a.y_traj[i],
                y_sub: a.y_sub[i],
            }),
        })
    };
    let mut lines = Vec::with_capacity(t_len + 3);
    lines.push(Record::Header {
        schema: SCHEMA_VERSION,
        task: ep.task.clone(),
        task_id: ep.task_id,
        seed: ep.seed,
        length: t_len,
        width: ep.final_observation.image.width,
        height: ep.final_observation.image.height,
        annotated: ann.is_some(),
        frames: mode,
    });
    for (t, s) in ep.steps.iter().enumerate() {
        lines.push(Record::Step {
            t,
            frame: frame(t, &s.observation, &s.mask)?,
            action: s.action,
            intervention: s.intervention,
            interaction_truth: s.interaction_truth,
            completed_subtask: s.completed_subtask,
            critic: s.critic,
            rewards: ann.map(|a| StepRewards {
                r_traj: a.r_traj[t],
                r_sub: a.r_sub[t],
                r: a.r[t],
            }),
        });
    }
    lines.push(Record::Final {
        frame: frame(t_len, &ep.final_observation, &ep.final_mask)?,
    });
    lines.push(Record::Footer {
        success: ep.success,
        length: t_len,
        interventions: ep.interventions.clone(),
    });

    let tmp_log = tmp_path(path, ".tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp_log)?);
        for r in &lines {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    if final_dir.exists() {
        fs::remove_dir_all(&final_dir)?;
    }
    if mode == FrameMode::Png {
        fs::rename(&tmp_dir, &final_dir)?;
    }
    fs::rename(&tmp_log, path)?;
    Ok(())
}

/// Reads an episode written by [`write_episode`]. Any malformed, missing or
/// out-of-order record fails the whole read.
pub fn read_episode(path: &Path) -> Result<Episode> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let corrupt = |line: usize, reason: String| Error::CorruptLine {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut records = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let r: Record = serde_json::from_str(l).map_err(|e| corrupt(i + 1, e.to_string()))?;
        records.push(r);
    }
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(corrupt(records.len(), "last line is not terminated".into()));
    }
    let mut it = records.into_iter().enumerate();
    let Some((_, Record::Header { schema, task, task_id, seed, length, width, height, annotated, frames: mode })) =
        it.next()
    else {
        return Err(corrupt(1, "missing header".into()));
    };
    if schema != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "{}: schema version {schema}, this build reads {SCHEMA_VERSION}",
            path.display()
        )));
    }
    let load = |line: usize, f: &FrameRecord| -> Result<(Observation, Mask)> {
        let png = match mode {
            FrameMode::Inline => B64.decode(&f.image).map_err(|e| corrupt(line, e.to_string()))?,
            FrameMode::Png => fs::read(base.join(&f.image)).map_err(|e| corrupt(line, format!("{}: {e}", f.image)))?,
        };
        let image = Image::from_png(&png).map_err(|e| corrupt(line, e.to_string()))?;
        if image.width != width || image.height != height {
            return Err(corrupt(line, "frame size differs from the header".into()));
        }
        let bits = B64.decode(&f.mask).map_err(|e| corrupt(line, e.to_string()))?;
        let mask = Mask::from_packed(width, height, &bits).map_err(|e| corrupt(line, e.to_string()))?;
        if f.labels.is_some() != annotated {
            return Err(corrupt(line, "annotation columns disagree with the header".into()));
        }
        Ok((
            Observation {
                image,
                proprio: f.proprio,
                task_id,
                subtask_index: f.subtask,
            },
            mask,
        ))
    };
    let mut steps = Vec::with_capacity(length);
    let mut ann = Annotation::default();
    let push_labels = |ann: &mut Annotation, f: &FrameRecord| {
        if let Some(l) = f.labels {
            ann.interaction.push(l.interaction);
            ann.g.push(l.g);
            ann.y_traj.push(l.y_traj);
            ann.y_sub.push(l.y_sub);
        }
    };
    for k in 0..length {
        let Some((i, Record::Step { t, frame, action, intervention, interaction_truth, completed_subtask, critic, rewards })) =
            it.next()
        else {
            return Err(corrupt(k + 2, "expected a step record".into()));
        };
        if t != k {
            return Err(corrupt(i + 1, format!("step index {t}, expected {k}")));
        }
        if rewards.is_some() != annotated {
            return Err(corrupt(i + 1, "reward columns disagree with the header".into()));
        }
        let (observation, mask) = load(i + 1, &frame)?;
        push_labels(&mut ann, &frame);
        if let Some(r) = rewards {
            ann.r_traj.push(r.r_traj);
            ann.r_sub.push(r.r_sub);
            ann.r.push(r.r);
        }
        steps.push(Step {
            observation,
            mask,
            action,
            intervention,
            interaction_truth,
            completed_subtask,
            critic,
        });
    }
    let Some((i, Record::Final { frame })) = it.next() else {
        return Err(corrupt(length + 2, "expected the final frame record".into()));
    };
    let (final_observation, final_mask) = load(i + 1, &frame)?;
    push_labels(&mut ann, &frame);
    let Some((i, Record::Footer { success, length: footer_len, interventions })) = it.next() else {
        return Err(corrupt(length + 3, "missing footer".into()));
    };
    if footer_len != length {
        return Err(corrupt(i + 1, "footer length differs from the header".into()));
    }
    if let Some((i, _)) = it.next() {
        return Err(corrupt(i + 1, "records after the footer".into()));
    }
    let ep = Episode {
        task,
        task_id,
        seed,
        steps,
        final_observation,
        final_mask,
        success,
        interventions,
        annotation: annotated.then_some(ann),
    };
    ep.validate()?;
    Ok(ep)
}

/// Log file name of the `i`-th episode in a buffer directory.
pub fn episode_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("episode_{i:04}.jsonl"))
}

/// Writes a buffer of episodes as `episode_NNNN.jsonl` files.
pub fn write_buffer(dir: &Path, eps: &[Episode], mode: FrameMode) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, e) in eps.iter().enumerate() {
        write_episode(&episode_file(dir, i), e, mode)?;
    }
    Ok(())
}

/// Log files of a buffer directory in name order.
pub fn buffer_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every episode of a buffer directory in name order.
pub fn read_buffer(dir: &Path) -> Result<Vec<Episode>> {
    buffer_files(dir)?.iter().map(|p| read_episode(p)).collect()
}
