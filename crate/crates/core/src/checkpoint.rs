//! Trainer checkpoints: configuration, all four networks, optimiser
//! moments, step counters and random-stream positions. Tensors are stored as
//! base64 little-endian `f64` so a save/load cycle is bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{AdamW, Parameters};
use crate::trainer::{RngState, Stage, Trainer};

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdamState {
    t: u64,
    m: String,
    v: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct File {
    format: u32,
    /// Last completed stage, if any.
    stage: Option<Stage>,
    config: String,
    actor_steps: usize,
    critic_steps: usize,
    rng_actor: RngState,
    rng_critic: RngState,
    policy: Vec<Tensor>,
    policy_ema: Vec<Tensor>,
    critic: Vec<Tensor>,
    critic_ema: Vec<Tensor>,
    actor_opt: AdamState,
    critic_opt: AdamState,
}

fn encode(x: &[f64]) -> String {
    let bytes: Vec<u8> = x.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn tensors<P: Parameters + ?Sized>(p: &P) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit(&mut |name, shape, data| {
        out.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: encode(data),
        })
    });
    out
}

fn restore<P: Parameters + ?Sized>(p: &mut P, what: &str, ts: &[Tensor]) -> Result<()> {
    let decoded: Vec<Vec<f64>> = ts.iter().map(|t| decode(&t.data)).collect::<Result<_>>()?;
    let mut i = 0;
    let mut err = None;
    p.visit_mut(&mut |name, dst| {
        if err.is_some() {
            return;
        }
        match (ts.get(i), decoded.get(i)) {
            (Some(t), Some(src)) if t.name == name && src.len() == dst.len() => dst.copy_from_slice(src),
            _ => err = Some(format!("{what}: tensor {i} (`{name}`) is missing or has the wrong size")),
        }
        i += 1;
    });
    if let Some(e) = err {
        return Err(Error::Checkpoint(e));
    }
    if i != ts.len() {
        return Err(Error::Checkpoint(format!("{what}: {} stored tensors for {i} parameters", ts.len())));
    }
    Ok(())
}

fn adam_state(o: &AdamW) -> AdamState {
    AdamState {
        t: o.t,
        m: encode(&o.m),
        v: encode(&o.v),
    }
}

fn restore_adam(o: &mut AdamW, s: &AdamState) -> Result<()> {
    let (m, v) = (decode(&s.m)?, decode(&s.v)?);
    if m.len() != o.m.len() || v.len() != o.v.len() {
        return Err(Error::Checkpoint("optimizer moments have the wrong size".into()));
    }
    o.t = s.t;
    o.m = m;
    o.v = v;
    Ok(())
}

/// Serialized checkpoint bytes.
pub fn to_bytes(tr: &Trainer, stage: Option<Stage>) -> Result<Vec<u8>> {
    let file = File {
        format: CHECKPOINT_FORMAT,
        stage,
        config: tr.cfg.to_toml_string(),
        actor_steps: tr.actor_steps,
        critic_steps: tr.critic_steps,
        rng_actor: RngState::capture(&tr.rng_actor),
        rng_critic: RngState::capture(&tr.rng_critic),
        policy: tensors(&tr.policy),
        policy_ema: tensors(&tr.policy_ema),
        critic: tensors(&tr.critic),
        critic_ema: tensors(&tr.critic_ema),
        actor_opt: adam_state(&tr.actor_opt),
        critic_opt: adam_state(&tr.critic_opt),
    };
    Ok(serde_json::to_vec(&file)?)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Trainer, Option<Stage>)> {
    let file: File = serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Schema(format!(
            "checkpoint format {}, this build reads {CHECKPOINT_FORMAT}",
            file.format
        )));
    }
    let cfg = Config::from_toml_str(&file.config)?;
    let mut tr = Trainer::new(&cfg)?;
    restore(&mut tr.policy, "policy", &file.policy)?;
    restore(&mut tr.policy_ema, "policy_ema", &file.policy_ema)?;
    restore(&mut tr.critic, "critic", &file.critic)?;
    restore(&mut tr.critic_ema, "critic_ema", &file.critic_ema)?;
    restore_adam(&mut tr.actor_opt, &file.actor_opt)?;
    restore_adam(&mut tr.critic_opt, &file.critic_opt)?;
    tr.actor_steps = file.actor_steps;
    tr.critic_steps = file.critic_steps;
    tr.rng_actor = file.rng_actor.restore();
    tr.rng_critic = file.rng_critic.restore();
    Ok((tr, file.stage))
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save(path: &Path, tr: &Trainer, stage: Option<Stage>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, to_bytes(tr, stage)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Trainer, Option<Stage>)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
