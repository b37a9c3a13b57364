//! WebSocket endpoint and the intervener that routes takeovers to the
//! attached operator.
//!
//! One rollout worker and one connection thread share a [`Hub`]. The worker
//! publishes a frame and a telemetry message per control step and then gives
//! the operator one step period to send commands. While a human takeover is
//! active the worker blocks until the operator supplies that step's action
//! (or releases, resets or disconnects); the console replies to every
//! telemetry message with one action, a zero action to hold position.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use igrft_core::episode::InterventionSource;
use igrft_core::error::{Error, Result};
use igrft_core::hil::{Intervener, ScriptedIntervener, Telemetry};
use igrft_core::sim::{ActionRow, Env, Image, WorldState};
use tungstenite::{Message, WebSocket};

use crate::protocol::{parse_client, ClientMessage, ServerMessage};

const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Default)]
struct HubState {
    operator: Option<u64>,
    next_id: u64,
    outbound: Option<Sender<String>>,
    takeover_requested: bool,
    in_takeover: bool,
    release_requested: bool,
    action: Option<ActionRow>,
    lost_in_takeover: bool,
    abort: bool,
    reset_seed: Option<u64>,
}

impl HubState {
    fn send(&self, msg: &ServerMessage) {
        if let Some(tx) = &self.outbound {
            let _ = tx.send(msg.to_json());
        }
    }

    fn takeover_open(&self) -> bool {
        self.in_takeover || self.takeover_requested
    }

    /// Applies one inbound message; the error text goes back to the console.
    fn apply(&mut self, msg: ClientMessage) -> Result<(), String> {
        match msg {
            ClientMessage::Takeover if self.takeover_open() => Err("a takeover is already active".into()),
            ClientMessage::Takeover => {
                self.takeover_requested = true;
                Ok(())
            }
            ClientMessage::Action { .. } if !self.takeover_open() => Err("action outside a takeover".into()),
            ClientMessage::Action { dx, dy, grip } => {
                self.action = Some([dx, dy, grip]);
                Ok(())
            }
            ClientMessage::Release if !self.takeover_open() => Err("release outside a takeover".into()),
            ClientMessage::Release => {
                if self.in_takeover {
                    self.release_requested = true;
                } else {
                    self.takeover_requested = false;
                }
                self.action = None;
                Ok(())
            }
            ClientMessage::Reset { seed } => {
                self.reset_seed = Some(seed);
                self.abort = true;
                Ok(())
            }
        }
    }
}

#[derive(Debug, Default)]
struct Hub {
    state: Mutex<HubState>,
    changed: Condvar,
    stop: AtomicBool,
}

impl Hub {
    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Snapshot of the session state, for monitoring and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionStatus {
    pub operator_attached: bool,
    pub takeover_requested: bool,
    pub in_takeover: bool,
    pub reset_pending: bool,
}

/// Listening WebSocket endpoint. Accepts at most one operator at a time;
/// further connections receive an error message and are closed.
#[derive(Debug)]
pub struct SessionServer {
    hub: Arc<Hub>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

impl SessionServer {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let hub = Arc::new(Hub::default());
        let h = Arc::clone(&hub);
        let acceptor = thread::Builder::new()
            .name("session-accept".into())
            .spawn(move || accept_loop(listener, h))?;
        log::info!("operator session listening on ws://{addr}");
        Ok(Self {
            hub,
            addr,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn status(&self) -> SessionStatus {
        let s = self.hub.lock();
        SessionStatus {
            operator_attached: s.operator.is_some(),
            takeover_requested: s.takeover_requested,
            in_takeover: s.in_takeover,
            reset_pending: s.abort,
        }
    }

    /// Intervener backed by this session. `fallback` acts whenever no
    /// operator is attached; with nobody connected the rollouts are exactly
    /// those of `fallback` alone. `step_period` paces control steps while an
    /// operator watches.
    pub fn intervener(&self, fallback: ScriptedIntervener, step_period: Duration) -> SessionIntervener {
        SessionIntervener {
            hub: Arc::clone(&self.hub),
            fallback,
            human: false,
            step_period,
        }
    }
}

impl Drop for SessionServer {
    fn drop(&mut self) {
        self.hub.stop.store(true, Ordering::SeqCst);
        self.hub.changed.notify_all();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(listener: TcpListener, hub: Arc<Hub>) {
    while !hub.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let h = Arc::clone(&hub);
                let spawned = thread::Builder::new()
                    .name("session-conn".into())
                    .spawn(move || {
                        if let Err(e) = serve_connection(stream, &h) {
                            log::warn!("connection from {peer} ended: {e}");
                        }
                    });
                if let Err(e) = spawned {
                    log::error!("cannot spawn connection thread: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL * 4),
            Err(e) => {
                log::error!("accept failed: {e}");
                thread::sleep(POLL * 20);
            }
        }
    }
}

fn ws_err(e: tungstenite::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn serve_connection(stream: TcpStream, hub: &Hub) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    let (id, rx) = {
        let mut s = hub.lock();
        if s.operator.is_some() {
            drop(s);
            let refusal = ServerMessage::error("another operator is already attached").to_json();
            ws.send(Message::text(refusal)).map_err(ws_err)?;
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        let (tx, rx) = mpsc::channel();
        let id = s.next_id;
        s.next_id += 1;
        s.operator = Some(id);
        s.outbound = Some(tx);
        (id, rx)
    };
    log::info!("operator {id} attached");
    let result = pump(&mut ws, hub, &rx);
    let mut s = hub.lock();
    if s.operator == Some(id) {
        s.operator = None;
        s.outbound = None;
        s.lost_in_takeover = s.in_takeover;
        s.takeover_requested = false;
        s.action = None;
    }
    drop(s);
    hub.changed.notify_all();
    log::info!("operator {id} detached");
    result
}

fn pump(ws: &mut WebSocket<TcpStream>, hub: &Hub, rx: &Receiver<String>) -> Result<()> {
    ws.get_ref().set_read_timeout(Some(POLL))?;
    while !hub.stop.load(Ordering::SeqCst) {
        while let Ok(text) = rx.try_recv() {
            ws.write(Message::text(text)).map_err(ws_err)?;
        }
        ws.flush().or_else(ignore_timeout)?;
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = match parse_client(text.as_str()) {
                    Ok(msg) => hub.lock().apply(msg).err(),
                    Err(reason) => Some(reason),
                };
                match reply {
                    Some(reason) => ws.send(Message::text(ServerMessage::error(reason).to_json())).map_err(ws_err)?,
                    None => hub.changed.notify_all(),
                }
            }
            Ok(Message::Binary(_)) => {
                ws.send(Message::text(ServerMessage::error("binary messages are not supported").to_json()))
                    .map_err(ws_err)?;
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(ws_err(e)),
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

fn ignore_timeout(e: tungstenite::Error) -> Result<()> {
    match e {
        tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => Ok(()),
        e => Err(ws_err(e)),
    }
}

/// Routes takeovers to the attached operator, or to the scripted fallback
/// when nobody is connected at the moment a takeover starts.
#[derive(Debug)]
pub struct SessionIntervener {
    hub: Arc<Hub>,
    fallback: ScriptedIntervener,
    /// Whether the current (or last) takeover is driven by the operator.
    human: bool,
    step_period: Duration,
}

impl SessionIntervener {
    fn check_abort(s: &mut HubState) -> Result<()> {
        if std::mem::take(&mut s.abort) {
            s.in_takeover = false;
            s.takeover_requested = false;
            s.release_requested = false;
            s.action = None;
            return Err(Error::Aborted("operator requested a reset".into()));
        }
        Ok(())
    }
}

impl Intervener for SessionIntervener {
    fn source(&self) -> InterventionSource {
        if self.human {
            InterventionSource::Human
        } else {
            InterventionSource::Scripted
        }
    }

    fn observe(&mut self, telemetry: &Telemetry, frame: &Image) -> Result<bool> {
        let mut s = self.hub.lock();
        Self::check_abort(&mut s)?;
        if s.operator.is_none() {
            return Ok(false);
        }
        s.send(&ServerMessage::frame(telemetry.step, frame)?);
        s.send(&ServerMessage::telemetry(telemetry));
        if !s.in_takeover {
            // Give the operator one step period to react to this step.
            let (guard, _) = self
                .hub
                .changed
                .wait_timeout_while(s, self.step_period, |s| !s.abort && !s.takeover_requested)
                .unwrap_or_else(|p| p.into_inner());
            s = guard;
            Self::check_abort(&mut s)?;
        }
        Ok(s.takeover_requested && !s.in_takeover)
    }

    fn begin(&mut self, env: &Env, state: &WorldState) -> Result<()> {
        let mut s = self.hub.lock();
        self.human = s.operator.is_some();
        if !self.human {
            drop(s);
            return self.fallback.begin(env, state);
        }
        s.takeover_requested = false;
        s.in_takeover = true;
        s.release_requested = false;
        s.lost_in_takeover = false;
        Ok(())
    }

    fn act(&mut self, env: &Env, state: &WorldState) -> Result<Option<ActionRow>> {
        if !self.human {
            return self.fallback.act(env, state);
        }
        let mut s = self.hub.lock();
        loop {
            Self::check_abort(&mut s)?;
            if std::mem::take(&mut s.lost_in_takeover) {
                s.in_takeover = false;
                return Err(Error::Disconnected("operator left during a takeover".into()));
            }
            if std::mem::take(&mut s.release_requested) {
                s.in_takeover = false;
                s.action = None;
                return Ok(None);
            }
            if let Some(a) = s.action.take() {
                return Ok(Some(a));
            }
            if self.hub.stop.load(Ordering::SeqCst) {
                return Err(Error::Disconnected("session server shut down".into()));
            }
            s = self
                .hub
                .changed
                .wait_timeout(s, POLL * 20)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    fn episode_end(&mut self, success: bool) -> Result<()> {
        let mut s = self.hub.lock();
        s.in_takeover = false;
        s.release_requested = false;
        s.send(&ServerMessage::EpisodeEnd { success });
        Ok(())
    }

    fn next_seed(&mut self) -> Option<u64> {
        self.hub.lock().reset_seed.take()
    }
}
