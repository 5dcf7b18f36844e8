//! Websocket gateway between a live run and a browser dashboard.
//!
//! Text frames carry JSON objects tagged by `type`:
//!
//! ```text
//! {"type":"hello","scenario_id":"joy-5","Ts":0.01}          server -> client, on connect
//! {"type":"telemetry","t":1.2,"y":0.3,"y_star":0.31,"u":-2.0,"fault":0}
//! {"type":"joystick","axis":0.5,"t_client":12.25}          client -> server
//! ```
//!
//! The first client to connect steers; joystick frames from later clients
//! are ignored until it leaves. When the steering client leaves, the axis
//! keeps its last value.

use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::error::{Error, Result};
use crate::metrics::TelemetryRow;

/// Display rate cap, in messages per simulated second.
pub const MAX_DISPLAY_RATE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WsMessage {
    Telemetry {
        t: f64,
        y: f64,
        y_star: f64,
        u: f64,
        fault: u8,
    },
    Joystick {
        axis: f64,
        #[serde(default)]
        t_client: f64,
    },
    Hello {
        scenario_id: String,
        #[serde(rename = "Ts")]
        ts: f64,
    },
}

impl WsMessage {
    pub fn telemetry(row: &TelemetryRow) -> Self {
        WsMessage::Telemetry {
            t: row.t,
            y: row.y_true,
            y_star: row.y_star,
            u: row.u_held,
            fault: row.fault_code,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("message serialises")
    }
}

/// Latest joystick axis, shared between the session and the control loop.
#[derive(Debug, Default)]
pub struct JoystickCell {
    bits: AtomicU64,
    updates: AtomicU64,
}

impl JoystickCell {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `axis` clamped to `[-1, 1]`; non-finite values are ignored.
    pub fn set(&self, axis: f64) {
        if !axis.is_finite() {
            return;
        }
        self.bits.store(axis.clamp(-1.0, 1.0).to_bits(), Ordering::Release);
        self.updates.fetch_add(1, Ordering::AcqRel);
    }

    pub fn get(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::Acquire))
    }

    pub fn updates(&self) -> u64 {
        self.updates.load(Ordering::Acquire)
    }
}

struct Client {
    id: usize,
    tx: Sender<String>,
}

struct Shared {
    joystick: Arc<JoystickCell>,
    hello: WsMessage,
    clients: Mutex<Vec<Client>>,
    steering: AtomicUsize,
    next_id: AtomicUsize,
    stop: AtomicBool,
}

const NO_CLIENT: usize = 0;

/// A running gateway. Dropping it stops the listener and all sessions.
pub struct Bridge {
    addr: SocketAddr,
    shared: Arc<Shared>,
    last_sent: Mutex<Option<f64>>,
    accept: Option<JoinHandle<()>>,
}

/// Starts accepting websocket clients on `addr`.
pub fn serve_bridge(addr: impl ToSocketAddrs, scenario_id: &str, ts: f64) -> Result<Bridge> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let shared = Arc::new(Shared {
        joystick: Arc::new(JoystickCell::new()),
        hello: WsMessage::Hello {
            scenario_id: scenario_id.to_string(),
            ts,
        },
        clients: Mutex::new(Vec::new()),
        steering: AtomicUsize::new(NO_CLIENT),
        next_id: AtomicUsize::new(1),
        stop: AtomicBool::new(false),
    });
    let accept = {
        let shared = shared.clone();
        std::thread::Builder::new()
            .name("bridge-accept".into())
            .spawn(move || accept_loop(listener, shared))?
    };
    log::info!("bridge listening on ws://{local}");
    Ok(Bridge {
        addr: local,
        shared,
        last_sent: Mutex::new(None),
        accept: Some(accept),
    })
}

impl Bridge {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn joystick(&self) -> Arc<JoystickCell> {
        self.shared.joystick.clone()
    }

    pub fn client_count(&self) -> usize {
        self.shared.clients.lock().expect("bridge poisoned").len()
    }

    /// Blocks until a client is connected or `timeout` passes.
    pub fn wait_for_client(&self, timeout: Duration) -> bool {
        let deadline = std::time::Instant::now() + timeout;
        while std::time::Instant::now() < deadline {
            if self.client_count() > 0 {
                return true;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        self.client_count() > 0
    }

    /// Forwards a telemetry row to every client, at most
    /// [`MAX_DISPLAY_RATE`] rows per simulated second.
    pub fn publish(&self, row: &TelemetryRow) {
        {
            let mut last = self.last_sent.lock().expect("bridge poisoned");
            if let Some(prev) = *last {
                if row.t - prev < 1.0 / MAX_DISPLAY_RATE - 1e-9 {
                    return;
                }
            }
            *last = Some(row.t);
        }
        let text = WsMessage::telemetry(row).to_json();
        let mut clients = self.shared.clients.lock().expect("bridge poisoned");
        clients.retain(|c| c.tx.send(text.clone()).is_ok());
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Bridge {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut sessions = Vec::new();
    while !shared.stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = shared.clone();
                let spawned = std::thread::Builder::new()
                    .name("bridge-session".into())
                    .spawn(move || {
                        if let Err(e) = session(stream, &shared) {
                            log::warn!("bridge session {peer}: {e}");
                        }
                    });
                match spawned {
                    Ok(h) => sessions.push(h),
                    Err(e) => log::warn!("bridge: cannot start session: {e}"),
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                log::warn!("bridge accept: {e}");
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }
    for h in sessions {
        let _ = h.join();
    }
}

fn would_block(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io)
        if matches!(io.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut))
}

fn ws_error(e: tungstenite::Error) -> Error {
    Error::Transport(std::io::Error::other(e.to_string()))
}

fn session(stream: TcpStream, shared: &Shared) -> Result<()> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| Error::Transport(std::io::Error::other(e.to_string())))?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;

    let id = shared.next_id.fetch_add(1, Ordering::AcqRel);
    let steering = shared
        .steering
        .compare_exchange(NO_CLIENT, id, Ordering::AcqRel, Ordering::Acquire)
        .is_ok();
    let (tx, rx) = mpsc::channel();
    ws.send(Message::text(shared.hello.to_json())).map_err(ws_error)?;
    shared.clients.lock().expect("bridge poisoned").push(Client { id, tx });
    log::info!("bridge client {id} connected{}", if steering { " (steering)" } else { "" });

    let result = pump(&mut ws, &rx, shared, id);

    shared.clients.lock().expect("bridge poisoned").retain(|c| c.id != id);
    let _ = shared
        .steering
        .compare_exchange(id, NO_CLIENT, Ordering::AcqRel, Ordering::Acquire);
    log::info!("bridge client {id} left");
    result
}

fn pump(ws: &mut WebSocket<TcpStream>, rx: &Receiver<String>, shared: &Shared, id: usize) -> Result<()> {
    loop {
        if shared.stop.load(Ordering::Acquire) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        match ws.read() {
            Ok(Message::Text(text)) => handle_inbound(text.as_str(), shared, id),
            Ok(Message::Close(_)) => {}
            Ok(_) => {}
            Err(e) if would_block(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(ws_error(e)),
        }
        while let Ok(text) = rx.try_recv() {
            match ws.send(Message::text(text)) {
                Ok(()) => {}
                Err(e) if would_block(&e) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
                Err(e) => return Err(ws_error(e)),
            }
        }
    }
}

fn handle_inbound(text: &str, shared: &Shared, id: usize) {
    match serde_json::from_str::<WsMessage>(text) {
        Ok(WsMessage::Joystick { axis, .. }) => {
            if shared.steering.load(Ordering::Acquire) == id {
                shared.joystick.set(axis);
            } else {
                log::debug!("bridge client {id} is read-only; joystick ignored");
            }
        }
        Ok(other) => log::debug!("bridge client {id}: ignoring {other:?}"),
        Err(e) => log::warn!("bridge client {id}: bad frame: {e}"),
    }
}
