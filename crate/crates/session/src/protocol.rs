//! JSON messages exchanged with the operator console. Every message is an
//! object whose `type` field names the variant; the committed
//! `protocol.schema.json` describes the same shapes.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use igrft_core::error::Result;
use igrft_core::hil::Telemetry;
use igrft_core::sim::{ActionRow, Image};
use serde::{Deserialize, Serialize};

/// JSON Schema of both message directions.
pub const PROTOCOL_SCHEMA: &str = include_str!("../protocol.schema.json");

/// Server to console.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Frame {
        step: usize,
        png_base64: String,
    },
    Telemetry {
        step: usize,
        value: f64,
        ref_value: f64,
        p_int: f64,
        subtask: usize,
        stagnating: bool,
    },
    EpisodeEnd {
        success: bool,
    },
    Error {
        reason: String,
    },
}

impl ServerMessage {
    pub fn frame(step: usize, image: &Image) -> Result<Self> {
        Ok(Self::Frame {
            step,
            png_base64: B64.encode(image.to_png()?),
        })
    }

    pub fn telemetry(t: &Telemetry) -> Self {
        Self::Telemetry {
            step: t.step,
            value: t.value,
            ref_value: t.ref_value,
            p_int: t.p_int,
            subtask: t.subtask,
            stagnating: t.stagnating,
        }
    }

    pub fn error(reason: impl Into<String>) -> Self {
        Self::Error { reason: reason.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages always serialize")
    }
}

/// Console to server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Begin a manual takeover.
    Takeover,
    /// Teleoperation action for the current control step.
    Action { dx: f64, dy: f64, grip: f64 },
    /// Hand control back to the policy.
    Release,
    /// Abandon the running rollout and start the next one from `seed`.
    Reset { seed: u64 },
}

impl ClientMessage {
    pub fn action_row(&self) -> Option<ActionRow> {
        match *self {
            Self::Action { dx, dy, grip } => Some([dx, dy, grip]),
            _ => None,
        }
    }
}

/// Parses and range-checks one inbound text message. The error string is
/// sent back to the console verbatim.
pub fn parse_client(text: &str) -> Result<ClientMessage, String> {
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
    let msg: ClientMessage = serde_json::from_value(raw.clone()).map_err(|e| format!("malformed message: {e}"))?;
    // Unit variants of a tagged enum ignore extra keys; compare key sets.
    let canonical = serde_json::to_value(msg).expect("client messages always serialize");
    let keys = |v: &serde_json::Value| v.as_object().map(|o| o.keys().cloned().collect::<Vec<_>>());
    if keys(&raw) != keys(&canonical) {
        return Err("malformed message: unexpected fields".into());
    }
    if let Some(a) = msg.action_row() {
        if a.iter().any(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err("action components must lie in [-1, 1]".into());
        }
    }
    Ok(msg)
}
