//! Run drivers.
//!
//! Every tick `k` (at `t = k Ts`) goes through the same sub-steps: the plant
//! samples and sends a measurement with `seq = k`; the fault model may drop
//! it; the server updates its estimator and control on acceptance or freezes
//! both; the server sends a control with `seq = k`; the fault model may drop
//! it; the plant latches or holds the control; the plant integrates one
//! period (except after the last tick) and a telemetry row is recorded.
//!
//! Lockstep runs these in order in one thread under virtual time. The UDP
//! loopback driver does the same over real sockets, waiting for each
//! delivered datagram. The realtime drivers run a plant half and a server
//! half that pace themselves against the wall clock and never block past
//! their tick budget.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::bridge::JoystickCell;
use crate::controller::{pi_control, IpController, IpGains, PiGains, PiState};
use crate::error::{Error, Result};
use crate::faults::TickOutcome;
use crate::metrics::{RunTelemetry, TelemetryRow};
use crate::plants::{NoiseSource, Plant};
use crate::scenarios::{ControllerSpec, ReferenceGenerator, ScenarioSpec};
use crate::transport::{
    CutWindow, Datagram, DatagramSink, Direction, Kind, LockstepChannel, LossInjector, UdpEndpoint,
};

pub const DEFAULT_WATCHDOG: Duration = Duration::from_secs(5);
pub const DEFAULT_HELLO_TIMEOUT: Duration = Duration::from_secs(60);

/// Fraction of the period the server waits for the tick's measurement.
const SERVER_WAIT: f64 = 0.5;
/// Fraction of the period the plant waits for the tick's control.
const PLANT_WAIT: f64 = 0.9;
const HELLO_PERIOD: Duration = Duration::from_millis(100);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Lockstep,
    UdpLoopback,
    UdpRemote { plant_addr: SocketAddr, server_addr: SocketAddr },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunMode {
    pub mode: Mode,
    pub realtime: bool,
}

impl RunMode {
    /// Lockstep is never paced; the remote halves always are.
    pub fn new(mode: Mode, realtime: bool) -> Self {
        let realtime = match mode {
            Mode::Lockstep => false,
            Mode::UdpLoopback => realtime,
            Mode::UdpRemote { .. } => true,
        };
        RunMode { mode, realtime }
    }

    pub fn lockstep() -> Self {
        Self::new(Mode::Lockstep, false)
    }

    pub fn name(&self) -> &'static str {
        match (self.mode, self.realtime) {
            (Mode::Lockstep, _) => "lockstep",
            (Mode::UdpLoopback, false) => "udp-loopback",
            (Mode::UdpLoopback, true) => "udp-loopback-realtime",
            (Mode::UdpRemote { .. }, _) => "udp",
        }
    }
}

pub type RowHook<'a> = &'a mut (dyn FnMut(&TelemetryRow) + Send);
pub type TickHook<'a> = &'a mut (dyn FnMut(usize, f64) + Send);

pub struct RunOptions<'a> {
    pub mode: RunMode,
    /// Recorded verbatim in the telemetry header.
    pub overrides: Vec<(String, String)>,
    pub watchdog: Duration,
    pub hello_timeout: Duration,
    /// Axis source for live joystick references.
    pub joystick: Option<Arc<JoystickCell>>,
    /// Called with every telemetry row as it is produced.
    pub on_row: Option<RowHook<'a>>,
    /// Called at the start of every server tick.
    pub pre_tick: Option<TickHook<'a>>,
}

impl<'a> RunOptions<'a> {
    pub fn new(mode: RunMode) -> Self {
        RunOptions {
            mode,
            overrides: Vec::new(),
            watchdog: DEFAULT_WATCHDOG,
            hello_timeout: DEFAULT_HELLO_TIMEOUT,
            joystick: None,
            on_row: None,
            pre_tick: None,
        }
    }
}

/// What the server decided at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ServerOutput {
    pub u: f64,
    pub f_est: f64,
    pub y_star: f64,
    pub y_star_dot: f64,
}

impl ServerOutput {
    fn payload(&self) -> Vec<f64> {
        vec![self.u, self.f_est, self.y_star, self.y_star_dot]
    }

    fn from_payload(p: &[f64]) -> Option<Self> {
        match p {
            [u, f_est, y_star, y_star_dot, ..] => Some(ServerOutput {
                u: *u,
                f_est: *f_est,
                y_star: *y_star,
                y_star_dot: *y_star_dot,
            }),
            _ => None,
        }
    }
}

enum Law {
    Ip(IpController),
    Pi(PiGains, PiState),
}

/// The controller side: reference generation plus the control law, with
/// freeze-on-miss.
pub struct ControlServer {
    law: Law,
    reference: ReferenceGenerator,
    last: ServerOutput,
    last_measurement_t: Option<f64>,
    ts: f64,
}

impl ControlServer {
    pub fn new(spec: &ScenarioSpec, joystick: Option<Arc<JoystickCell>>) -> Result<Self> {
        let law = match &spec.controller {
            ControllerSpec::Ip { alpha, kp, tau, estimator } => Law::Ip(IpController::new(
                IpGains { alpha: *alpha, kp: *kp },
                *estimator,
                *tau,
                spec.plant.u_limits(),
            )?),
            ControllerSpec::Pi(g) => Law::Pi(*g, PiState::default()),
        };
        Ok(ControlServer {
            law,
            reference: ReferenceGenerator::new(&spec.reference, spec.duration, joystick)?,
            last: ServerOutput::default(),
            last_measurement_t: None,
            ts: spec.sampling_period,
        })
    }

    /// One server tick. Without a measurement, `u` and `f_est` are re-emitted
    /// unchanged; the reference still advances.
    pub fn tick(&mut self, t: f64, measurement: Option<f64>) -> Result<ServerOutput> {
        let (y_star, y_star_dot) = self.reference.reference_at(t)?;
        let mut out = ServerOutput {
            y_star,
            y_star_dot,
            ..self.last
        };
        if let Some(y) = measurement.filter(|y| y.is_finite()) {
            match &mut self.law {
                Law::Ip(c) => {
                    out.u = c.update(t, y, y_star, y_star_dot)?;
                    out.f_est = c.state().f_est();
                }
                Law::Pi(g, s) => {
                    let dt = self.last_measurement_t.map_or(self.ts, |t0| t - t0);
                    out.u = match pi_control(s, g, y_star - y, dt) {
                        Ok(u) => u,
                        Err(e) => {
                            log::warn!("t={t}: holding u: {e}");
                            self.last.u
                        }
                    };
                }
            }
            self.last_measurement_t = Some(t);
        }
        self.last = out;
        Ok(out)
    }
}

fn make_plant(spec: &ScenarioSpec) -> Result<Plant> {
    let noise = NoiseSource::new(spec.noise(), spec.sampling_period)?;
    Plant::new(spec.plant.clone(), spec.initial_y, noise, spec.substeps)
}

fn advance(plant: &mut Plant, spec: &ScenarioSpec, k: usize) -> Result<()> {
    plant.advance(spec.sampling_period)?;
    // keep plant time on the tick grid
    plant.state.t = spec.tick_time(k + 1);
    Ok(())
}

/// In-order delivery for the virtual-time drivers.
trait TickLink {
    fn send(&mut self, direction: Direction, d: &Datagram) -> Result<()>;
    /// Newest accepted datagram for this tick, if one was sent.
    fn recv(&mut self, direction: Direction, seq: u32) -> Result<Option<Datagram>>;
}

#[derive(Default)]
struct InProcess {
    up: LockstepChannel,
    down: LockstepChannel,
}

impl TickLink for InProcess {
    fn send(&mut self, direction: Direction, d: &Datagram) -> Result<()> {
        match direction {
            Direction::PlantToServer => self.up.send_datagram(d),
            Direction::ServerToPlant => self.down.send_datagram(d),
        }
    }

    fn recv(&mut self, direction: Direction, _seq: u32) -> Result<Option<Datagram>> {
        match direction {
            Direction::PlantToServer => self.up.latest(),
            Direction::ServerToPlant => self.down.latest(),
        }
    }
}

struct Loopback {
    plant: UdpEndpoint,
    server: UdpEndpoint,
    timeout: Duration,
}

impl Loopback {
    fn bind(timeout: Duration) -> Result<Self> {
        let mut plant = UdpEndpoint::bind("127.0.0.1:0")?;
        let mut server = UdpEndpoint::bind("127.0.0.1:0")?;
        plant.set_peer(server.local_addr()?);
        server.set_peer(plant.local_addr()?);
        Ok(Loopback { plant, server, timeout })
    }
}

impl TickLink for Loopback {
    fn send(&mut self, direction: Direction, d: &Datagram) -> Result<()> {
        match direction {
            Direction::PlantToServer => self.plant.send_datagram(d),
            Direction::ServerToPlant => self.server.send_datagram(d),
        }
    }

    fn recv(&mut self, direction: Direction, seq: u32) -> Result<Option<Datagram>> {
        let (ep, kind) = match direction {
            Direction::PlantToServer => (&self.server, Kind::Measurement),
            Direction::ServerToPlant => (&self.plant, Kind::Control),
        };
        match ep.mailbox().take_at_least(kind, seq, Instant::now() + self.timeout) {
            Some((d, _)) => Ok(Some(d)),
            None => Err(Error::Watchdog(format!(
                "{kind:?} seq {seq} sent over loopback but not received within {:?}",
                self.timeout
            ))),
        }
    }
}

fn seq(k: usize) -> u32 {
    u32::try_from(k).expect("tick count fits the sequence number")
}

fn drive(spec: &ScenarioSpec, opts: &mut RunOptions, link: &mut dyn TickLink) -> Result<RunTelemetry> {
    let mut plant = make_plant(spec)?;
    let mut server = ControlServer::new(spec, opts.joystick.clone())?;
    let mut injector = LossInjector::new(spec.loss_model()?);
    let mut tel = RunTelemetry::new(spec, opts.mode.name(), opts.overrides.clone());
    let n = spec.ticks();
    for k in 0..=n {
        let t = spec.tick_time(k);
        let (y_true, y_measured) = plant.measure();

        let up = Datagram::new(Kind::Measurement, seq(k), t, vec![y_measured]);
        let up_ok = injector.decide(Direction::PlantToServer, t).delivered();
        if up_ok {
            link.send(Direction::PlantToServer, &up)?;
        }
        let received = if up_ok { link.recv(Direction::PlantToServer, seq(k))? } else { None };

        if let Some(hook) = opts.pre_tick.as_mut() {
            hook(k, t);
        }
        let out = server.tick(t, received.and_then(|d| d.payload.first().copied()))?;

        let down = Datagram::new(Kind::Control, seq(k), t, out.payload());
        let down_ok = injector.decide(Direction::ServerToPlant, t).delivered();
        if down_ok {
            link.send(Direction::ServerToPlant, &down)?;
        }
        let control = if down_ok { link.recv(Direction::ServerToPlant, seq(k))? } else { None };
        plant.apply(control.and_then(|d| d.payload.first().copied()));

        let code = tel.faults.record(
            t,
            TickOutcome {
                measurement_dropped: !up_ok,
                control_dropped: !down_ok,
            },
        );
        let row = TelemetryRow {
            t,
            y_true,
            y_measured,
            y_star: out.y_star,
            u_commanded: out.u,
            u_held: plant.held_u(),
            f_est: out.f_est,
            fault_code: code.as_u8(),
        };
        if let Some(hook) = opts.on_row.as_mut() {
            hook(&row);
        }
        tel.rows.push(row);
        if k < n {
            advance(&mut plant, spec, k)?;
        }
    }
    Ok(tel)
}

/// Runs `spec` with default options.
pub fn run(spec: &ScenarioSpec, mode: RunMode) -> Result<RunTelemetry> {
    run_with(spec, RunOptions::new(mode))
}

pub fn run_with(spec: &ScenarioSpec, mut opts: RunOptions) -> Result<RunTelemetry> {
    spec.validate()?;
    match (opts.mode.mode, opts.mode.realtime) {
        (Mode::Lockstep, _) => drive(spec, &mut opts, &mut InProcess::default()),
        (Mode::UdpLoopback, false) => {
            let mut link = Loopback::bind(opts.watchdog)?;
            drive(spec, &mut opts, &mut link)
        }
        (Mode::UdpLoopback, true) => {
            let plant_ep = UdpEndpoint::bind("127.0.0.1:0")?;
            let server_ep = UdpEndpoint::bind("127.0.0.1:0")?;
            run_halves(spec, opts, plant_ep, server_ep)
        }
        (Mode::UdpRemote { plant_addr, server_addr }, _) => {
            let plant_ep = UdpEndpoint::bind(plant_addr)?;
            let server_ep = UdpEndpoint::bind(server_addr)?;
            run_halves(spec, opts, plant_ep, server_ep)
        }
    }
}

fn run_halves(
    spec: &ScenarioSpec,
    opts: RunOptions,
    plant_ep: UdpEndpoint,
    mut server_ep: UdpEndpoint,
) -> Result<RunTelemetry> {
    server_ep.set_peer(plant_ep.local_addr()?);
    let half = HalfOptions {
        watchdog: opts.watchdog,
        hello_timeout: opts.hello_timeout,
        mode_name: opts.mode.name().to_string(),
        overrides: opts.overrides.clone(),
    };
    let RunOptions { joystick, on_row, pre_tick, .. } = opts;
    let (tel, log) = std::thread::scope(|s| {
        let server_half = half.clone();
        let server = s.spawn(move || run_server_half(spec, server_ep, &server_half, joystick, pre_tick));
        let plant = run_plant_half(spec, plant_ep, &half, on_row);
        let server = server.join().unwrap_or_else(|_| Err(Error::ControllerFault("server thread panicked".into())));
        (plant, server)
    });
    let mut tel = tel?;
    let log = log?;
    // the server's own record is exact even on ticks whose control was lost
    for row in &mut tel.rows {
        let k = (row.t / spec.sampling_period).round() as usize;
        if let Some(Some(out)) = log.outputs.get(k) {
            row.u_commanded = out.u;
            row.f_est = out.f_est;
            row.y_star = out.y_star;
        }
    }
    Ok(tel)
}

#[derive(Debug, Clone)]
pub struct HalfOptions {
    pub watchdog: Duration,
    pub hello_timeout: Duration,
    pub mode_name: String,
    pub overrides: Vec<(String, String)>,
}

impl Default for HalfOptions {
    fn default() -> Self {
        HalfOptions {
            watchdog: DEFAULT_WATCHDOG,
            hello_timeout: DEFAULT_HELLO_TIMEOUT,
            mode_name: "udp".into(),
            overrides: Vec::new(),
        }
    }
}

/// Server decisions by tick; `None` for ticks the server never ran.
#[derive(Debug, Clone, Default)]
pub struct ServerLog {
    pub outputs: Vec<Option<ServerOutput>>,
    pub accepted: u64,
    pub rejected: u64,
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        std::thread::sleep(deadline - now);
    }
}

fn at(start: Instant, seconds: f64) -> Instant {
    start + Duration::from_secs_f64(seconds.max(0.0))
}

/// Silence detector that ignores scheduled cuts on the incoming direction.
struct Watchdog<'a> {
    limit: Duration,
    last: Instant,
    cuts: &'a [CutWindow],
    incoming: Direction,
}

impl<'a> Watchdog<'a> {
    fn heard(&mut self) {
        self.last = Instant::now();
    }

    fn check(&mut self, t: f64, what: &str) -> Result<()> {
        if self.cuts.iter().any(|w| w.contains(self.incoming, t)) {
            self.heard();
            return Ok(());
        }
        let silent = self.last.elapsed();
        if silent > self.limit {
            return Err(Error::Watchdog(format!(
                "no {what} for {:.1}s at t={t:.2}s (limit {:?})",
                silent.as_secs_f64(),
                self.limit
            )));
        }
        Ok(())
    }
}

/// Plant side of a UDP run. Waits for the server's hello, then ticks against
/// the wall clock. `u_commanded`, `f_est` and `y_star` in the telemetry are
/// the values carried by the last control that arrived.
pub fn run_plant_half(
    spec: &ScenarioSpec,
    mut ep: UdpEndpoint,
    opts: &HalfOptions,
    mut on_row: Option<RowHook>,
) -> Result<RunTelemetry> {
    spec.validate()?;
    let (_, server) = ep
        .mailbox()
        .take_at_least(Kind::Reference, 0, Instant::now() + opts.hello_timeout)
        .ok_or_else(|| Error::Watchdog(format!("no server hello within {:?}", opts.hello_timeout)))?;
    ep.set_peer(server);
    log::info!("plant: server at {server}");

    let model = spec.loss_model()?;
    let mut injector = LossInjector::new(model.clone());
    let mut plant = make_plant(spec)?;
    let mut tel = RunTelemetry::new(spec, &opts.mode_name, opts.overrides.clone());
    let mut last = ServerOutput::default();
    let start = Instant::now();
    let mut dog = Watchdog {
        limit: opts.watchdog,
        last: start,
        cuts: &model.cut_windows,
        incoming: Direction::ServerToPlant,
    };
    let ts = spec.sampling_period;
    let n = spec.ticks();
    for k in 0..=n {
        let t = spec.tick_time(k);
        sleep_until(at(start, t));
        let (y_true, y_measured) = plant.measure();
        let up = Datagram::new(Kind::Measurement, seq(k), t, vec![y_measured]);
        let sent = injector.send_with_loss(&mut ep, &up, Direction::PlantToServer, t)?;

        let control = ep
            .mailbox()
            .take_at_least(Kind::Control, seq(k), at(start, t + PLANT_WAIT * ts))
            .and_then(|(d, _)| ServerOutput::from_payload(&d.payload));
        if let Some(out) = control {
            dog.heard();
            last = out;
        }
        plant.apply(control.map(|c| c.u));
        let code = tel.faults.record(
            t,
            TickOutcome {
                measurement_dropped: !sent.delivered(),
                control_dropped: control.is_none(),
            },
        );
        dog.check(t, "control from the server")?;
        let row = TelemetryRow {
            t,
            y_true,
            y_measured,
            y_star: last.y_star,
            u_commanded: last.u,
            u_held: plant.held_u(),
            f_est: last.f_est,
            fault_code: code.as_u8(),
        };
        if let Some(hook) = on_row.as_mut() {
            hook(&row);
        }
        tel.rows.push(row);
        if k < n {
            advance(&mut plant, spec, k)?;
        }
    }
    Ok(tel)
}

/// Server side of a UDP run. `ep` must already know the plant address.
/// Announces itself until the first measurement arrives, then serves one
/// control per tick, freezing when the tick's measurement is missing.
pub fn run_server_half(
    spec: &ScenarioSpec,
    mut ep: UdpEndpoint,
    opts: &HalfOptions,
    joystick: Option<Arc<JoystickCell>>,
    mut pre_tick: Option<TickHook>,
) -> Result<ServerLog> {
    spec.validate()?;
    let ts = spec.sampling_period;
    let hello_deadline = Instant::now() + opts.hello_timeout;
    let mut hello_seq = 0;
    let mut pending = loop {
        ep.send_datagram(&Datagram::new(Kind::Reference, hello_seq, 0.0, vec![ts]))?;
        hello_seq += 1;
        if let Some((d, _)) = ep
            .mailbox()
            .take_at_least(Kind::Measurement, 0, Instant::now() + HELLO_PERIOD)
        {
            break Some(d);
        }
        if Instant::now() > hello_deadline {
            return Err(Error::Watchdog(format!("no measurement within {:?}", opts.hello_timeout)));
        }
    };
    let first = pending.as_ref().map_or(0, |d| d.seq) as usize;
    let start = Instant::now() - Duration::from_secs_f64(first as f64 * ts);

    let model = spec.loss_model()?;
    let mut injector = LossInjector::new(model.clone());
    let mut server = ControlServer::new(spec, joystick)?;
    let n = spec.ticks();
    let mut log = ServerLog {
        outputs: vec![None; n + 1],
        ..ServerLog::default()
    };
    let mut dog = Watchdog {
        limit: opts.watchdog,
        last: Instant::now(),
        cuts: &model.cut_windows,
        incoming: Direction::PlantToServer,
    };
    for k in first..=n {
        let t = spec.tick_time(k);
        let candidate = match pending.take() {
            Some(d) => Some(d),
            None => ep
                .mailbox()
                .take_at_least(Kind::Measurement, seq(k), at(start, t + SERVER_WAIT * ts))
                .map(|(d, _)| d),
        };
        let measurement = match candidate {
            Some(d) if d.seq as usize == k => Some(d),
            Some(d) if d.seq as usize > k => {
                pending = Some(d);
                None
            }
            _ => None,
        };
        if measurement.is_some() {
            dog.heard();
        }
        if let Some(hook) = pre_tick.as_mut() {
            hook(k, t);
        }
        let out = server.tick(t, measurement.and_then(|d| d.payload.first().copied()))?;
        let down = Datagram::new(Kind::Control, seq(k), t, out.payload());
        injector.send_with_loss(&mut ep, &down, Direction::ServerToPlant, t)?;
        log.outputs[k] = Some(out);
        dog.check(t, "measurement from the plant")?;
    }
    let streams = ep.shutdown();
    log.accepted = streams.accepted;
    log.rejected = streams.rejected;
    Ok(log)
}
