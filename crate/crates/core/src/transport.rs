//! Wire codec, sender-side loss injection, sequence-number discard and the
//! two interchangeable channels (in-process lockstep queue, UDP sockets).
//!
//! Frame layout, little-endian:
//!
//! ```text
//! 0..2   magic 0x4D46
//! 2      version (1)
//! 3      kind: 0 measurement, 1 control, 2 reference
//! 4..8   seq (u32)
//! 8..16  timestamp, microseconds since run start (u64)
//! 16..   payload, f64 each, at most 8
//! ```
//!
//! The sample count is implied by the datagram length (`16 + 8 * count`).

use std::collections::{HashMap, VecDeque};
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: u16 = 0x4D46;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const MAX_SAMPLES: usize = 8;
pub const MAX_FRAME: usize = HEADER_LEN + 8 * MAX_SAMPLES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Measurement = 0,
    Control = 1,
    Reference = 2,
}

impl TryFrom<u8> for Kind {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Kind::Measurement),
            1 => Ok(Kind::Control),
            2 => Ok(Kind::Reference),
            other => Err(Error::UnknownKind(other)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datagram {
    pub kind: Kind,
    pub seq: u32,
    pub timestamp_us: u64,
    pub payload: Vec<f64>,
}

impl Datagram {
    pub fn new(kind: Kind, seq: u32, t: f64, payload: Vec<f64>) -> Self {
        Datagram {
            kind,
            seq,
            timestamp_us: (t.max(0.0) * 1e6).round() as u64,
            payload,
        }
    }
}

pub fn encode(d: &Datagram) -> Result<Vec<u8>> {
    if d.payload.len() > MAX_SAMPLES {
        return Err(Error::Encoding(format!(
            "payload has {} samples, at most {MAX_SAMPLES} fit",
            d.payload.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * d.payload.len());
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(d.kind as u8);
    out.extend_from_slice(&d.seq.to_le_bytes());
    out.extend_from_slice(&d.timestamp_us.to_le_bytes());
    for v in &d.payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Datagram> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Framing(format!("{} bytes is shorter than the header", bytes.len())));
    }
    let magic = u16::from_le_bytes([bytes[0], bytes[1]]);
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[2] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[2]));
    }
    let kind = Kind::try_from(bytes[3])?;
    let body = bytes.len() - HEADER_LEN;
    if !body.is_multiple_of(8) || body / 8 > MAX_SAMPLES {
        return Err(Error::Framing(format!("payload of {body} bytes is not 0..={MAX_SAMPLES} f64")));
    }
    let seq = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let timestamp_us = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Datagram {
        kind,
        seq,
        timestamp_us,
        payload,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Measurements; losses here are fault 1.
    PlantToServer,
    /// Controls; losses here are fault 2.
    ServerToPlant,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::PlantToServer => 0,
            Direction::ServerToPlant => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutWindow {
    pub direction: Direction,
    pub start: f64,
    pub end: f64,
}

impl CutWindow {
    pub fn contains(&self, direction: Direction, t: f64) -> bool {
        self.direction == direction && self.start <= t && t < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossModel {
    pub p_fault1: f64,
    pub p_fault2: f64,
    pub cut_windows: Vec<CutWindow>,
    pub seed: u64,
}

impl LossModel {
    pub fn lossless() -> Self {
        LossModel {
            p_fault1: 0.0,
            p_fault2: 0.0,
            cut_windows: Vec::new(),
            seed: 0,
        }
    }

    pub fn probability(&self, direction: Direction) -> f64 {
        match direction {
            Direction::PlantToServer => self.p_fault1,
            Direction::ServerToPlant => self.p_fault2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered,
    DroppedCut,
    DroppedRandom,
}

impl Delivery {
    pub fn delivered(self) -> bool {
        self == Delivery::Delivered
    }
}

/// Sender-side fault injection with one RNG stream per direction. One draw is
/// consumed per send even inside a cut window, so cut placement never shifts
/// the Bernoulli pattern.
#[derive(Debug, Clone)]
pub struct LossInjector {
    model: LossModel,
    rngs: [ChaCha8Rng; 2],
}

impl LossInjector {
    pub fn new(model: LossModel) -> Self {
        let stream = |dir: Direction| {
            let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
            rng.set_stream(dir.index() as u64 + 1);
            rng
        };
        let rngs = [stream(Direction::PlantToServer), stream(Direction::ServerToPlant)];
        LossInjector { model, rngs }
    }

    pub fn model(&self) -> &LossModel {
        &self.model
    }

    pub fn decide(&mut self, direction: Direction, t: f64) -> Delivery {
        let draw: f64 = self.rngs[direction.index()].random();
        if self.model.cut_windows.iter().any(|w| w.contains(direction, t)) {
            Delivery::DroppedCut
        } else if draw < self.model.probability(direction) {
            Delivery::DroppedRandom
        } else {
            Delivery::Delivered
        }
    }

    /// Hands `d` to `sink` unless the fault model drops it. Socket errors are
    /// returned as transport errors, distinct from injected drops.
    pub fn send_with_loss<S: DatagramSink + ?Sized>(
        &mut self,
        sink: &mut S,
        d: &Datagram,
        direction: Direction,
        t: f64,
    ) -> Result<Delivery> {
        let outcome = self.decide(direction, t);
        if outcome.delivered() {
            sink.send_datagram(d)?;
        } else {
            log::trace!("drop t={t:.3} dir={direction:?} seq={} ({outcome:?})", d.seq);
        }
        Ok(outcome)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub sender: Option<SocketAddr>,
    pub kind: Kind,
}

/// Last accepted sequence number per stream; anything not newer is discarded.
#[derive(Debug, Clone, Default)]
pub struct StreamState {
    last: HashMap<StreamKey, u32>,
    pub accepted: u64,
    pub rejected: u64,
}

impl StreamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accept(&mut self, d: &Datagram, sender: Option<SocketAddr>) -> bool {
        let key = StreamKey { sender, kind: d.kind };
        match self.last.get(&key) {
            Some(&last) if d.seq <= last => {
                self.rejected += 1;
                false
            }
            _ => {
                self.last.insert(key, d.seq);
                self.accepted += 1;
                true
            }
        }
    }

    pub fn last_seq(&self, sender: Option<SocketAddr>, kind: Kind) -> Option<u32> {
        self.last.get(&StreamKey { sender, kind }).copied()
    }
}

pub trait DatagramSink {
    fn send_datagram(&mut self, d: &Datagram) -> Result<()>;
}

/// Single-threaded in-process channel; frames still go through the codec.
#[derive(Debug, Default)]
pub struct LockstepChannel {
    queue: VecDeque<Vec<u8>>,
    streams: StreamState,
}

impl LockstepChannel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decodes everything queued and returns the newest accepted datagram.
    pub fn latest(&mut self) -> Result<Option<Datagram>> {
        let mut newest = None;
        while let Some(frame) = self.queue.pop_front() {
            let d = decode(&frame)?;
            if self.streams.accept(&d, None) {
                newest = Some(d);
            }
        }
        Ok(newest)
    }

    pub fn streams(&self) -> &StreamState {
        &self.streams
    }
}

impl DatagramSink for LockstepChannel {
    fn send_datagram(&mut self, d: &Datagram) -> Result<()> {
        self.queue.push_back(encode(d)?);
        Ok(())
    }
}

#[derive(Debug, Default)]
struct Slot {
    latest: [Option<(Datagram, SocketAddr)>; 3],
    received: u64,
    last_rx: Option<Instant>,
}

/// Latest-value mailbox between a receive thread and a control loop, one
/// slot per datagram kind. Stale values are overwritten.
#[derive(Debug, Default)]
pub struct Mailbox {
    slot: Mutex<Slot>,
    cv: Condvar,
}

impl Mailbox {
    fn post(&self, d: Option<(Datagram, SocketAddr)>) {
        let mut slot = self.slot.lock().expect("mailbox poisoned");
        if let Some(d) = d {
            let i = d.0.kind as usize;
            slot.latest[i] = Some(d);
        }
        slot.received += 1;
        slot.last_rx = Some(Instant::now());
        self.cv.notify_all();
    }

    pub fn take(&self, kind: Kind) -> Option<(Datagram, SocketAddr)> {
        self.slot.lock().expect("mailbox poisoned").latest[kind as usize].take()
    }

    /// Frames read off the socket so far, including rejected ones.
    pub fn received(&self) -> u64 {
        self.slot.lock().expect("mailbox poisoned").received
    }

    pub fn last_rx(&self) -> Option<Instant> {
        self.slot.lock().expect("mailbox poisoned").last_rx
    }

    /// Blocks until at least `count` frames have been read or `timeout` passes.
    pub fn wait_received(&self, count: u64, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut slot = self.slot.lock().expect("mailbox poisoned");
        while slot.received < count {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            slot = self.cv.wait_timeout(slot, deadline - now).expect("mailbox poisoned").0;
        }
        true
    }

    /// Waits until `deadline` for a datagram of `kind` with `seq >= min_seq`
    /// and takes it. Older ones still waiting in the slot are dropped.
    pub fn take_at_least(&self, kind: Kind, min_seq: u32, deadline: Instant) -> Option<(Datagram, SocketAddr)> {
        let i = kind as usize;
        let mut slot = self.slot.lock().expect("mailbox poisoned");
        loop {
            match &slot.latest[i] {
                Some((d, _)) if d.seq >= min_seq => return slot.latest[i].take(),
                Some(_) => slot.latest[i] = None,
                None => {}
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            slot = self.cv.wait_timeout(slot, deadline - now).expect("mailbox poisoned").0;
        }
    }
}

/// A UDP socket with a receive thread feeding a [`Mailbox`].
#[derive(Debug)]
pub struct UdpEndpoint {
    socket: Arc<UdpSocket>,
    peer: Option<SocketAddr>,
    mailbox: Arc<Mailbox>,
    stop: Arc<AtomicBool>,
    rx: Option<JoinHandle<StreamState>>,
}

impl UdpEndpoint {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self> {
        let socket = UdpSocket::bind(addr)?;
        socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        let socket = Arc::new(socket);
        let mailbox = Arc::new(Mailbox::default());
        let stop = Arc::new(AtomicBool::new(false));
        let rx = {
            let (socket, mailbox, stop) = (socket.clone(), mailbox.clone(), stop.clone());
            std::thread::Builder::new()
                .name("udp-rx".into())
                .spawn(move || receive_loop(&socket, &mailbox, &stop))?
        };
        Ok(UdpEndpoint {
            socket,
            peer: None,
            mailbox,
            stop,
            rx: Some(rx),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.socket.local_addr()?)
    }

    pub fn set_peer(&mut self, peer: SocketAddr) {
        self.peer = Some(peer);
    }

    pub fn peer(&self) -> Option<SocketAddr> {
        self.peer
    }

    pub fn mailbox(&self) -> &Arc<Mailbox> {
        &self.mailbox
    }

    /// Stops the receive thread and returns its stream statistics.
    pub fn shutdown(mut self) -> StreamState {
        self.stop_rx()
    }

    fn stop_rx(&mut self) -> StreamState {
        self.stop.store(true, Ordering::Relaxed);
        self.rx
            .take()
            .and_then(|h| h.join().ok())
            .unwrap_or_default()
    }
}

impl Drop for UdpEndpoint {
    fn drop(&mut self) {
        self.stop_rx();
    }
}

impl DatagramSink for UdpEndpoint {
    fn send_datagram(&mut self, d: &Datagram) -> Result<()> {
        let peer = self
            .peer
            .ok_or_else(|| Error::Transport(std::io::Error::other("no peer address")))?;
        self.socket.send_to(&encode(d)?, peer)?;
        Ok(())
    }
}

fn receive_loop(socket: &UdpSocket, mailbox: &Mailbox, stop: &AtomicBool) -> StreamState {
    let mut streams = StreamState::new();
    let mut buf = [0u8; 2048];
    while !stop.load(Ordering::Relaxed) {
        match socket.recv_from(&mut buf) {
            Ok((n, src)) => match decode(&buf[..n]) {
                Ok(d) => {
                    let fresh = streams.accept(&d, Some(src));
                    mailbox.post(fresh.then_some((d, src)));
                }
                Err(err) => {
                    log::warn!("discarding frame from {src}: {err}");
                    mailbox.post(None);
                }
            },
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => {
                log::warn!("udp receive error: {e}");
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
    streams
}
