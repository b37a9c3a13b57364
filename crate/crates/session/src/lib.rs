//! Live operator session: a WebSocket endpoint that streams frames and
//! critic telemetry during rollouts and accepts manual takeovers.
//!
//! Without an attached operator the session intervener behaves exactly like
//! its scripted fallback, so a served run and a headless run with the same
//! seeds produce identical training results.

pub mod protocol;
mod server;

pub use protocol::{parse_client, ClientMessage, ServerMessage, PROTOCOL_SCHEMA};
pub use server::{SessionIntervener, SessionServer, SessionStatus};
