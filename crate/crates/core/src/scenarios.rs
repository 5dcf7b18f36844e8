//! Scenario descriptions, the reference generator and the built-in catalog.
//!
//! Scenario files are TOML: a list of `[[scenario]]` tables with the same
//! shape as [`ScenarioSpec`]. `mfcnet show <id>` prints a catalog entry in
//! that form.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bridge::JoystickCell;
use crate::controller::{EstimatorKind, IpGains, PiGains};
use crate::error::{Error, Result};
use crate::faults::{build_schedule, FaultSpec};
use crate::plants::{AeroParams, NoiseSpec, PlantModel, TankParams, ValveSchedule};
use crate::transport::{CutWindow, Direction, LossModel};

/// Slack for comparing tick times against breakpoints.
const TIME_EPS: f64 = 1e-9;

pub const JOYSTICK_SESSION: &str = "joystick_session";
const JOYSTICK_SESSION_CSV: &str = include_str!("../data/joystick_session.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    PiecewiseConstant,
    FilteredPiecewiseConstant,
    FilteredJoystick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoystickSource {
    /// A trace compiled into the binary.
    Embedded(String),
    /// CSV of `t_seconds,axis_value`.
    RecordedTrace(PathBuf),
    /// Axis values pushed by a bridge client.
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProgram {
    pub kind: ReferenceKind,
    #[serde(default)]
    pub setpoints: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_time_constant: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joystick: Option<JoystickSource>,
    /// Output units per unit of joystick axis.
    #[serde(default = "one")]
    pub axis_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

impl ReferenceProgram {
    pub fn steps(setpoints: Vec<(f64, f64)>) -> Self {
        ReferenceProgram {
            kind: ReferenceKind::PiecewiseConstant,
            setpoints,
            filter_time_constant: None,
            joystick: None,
            axis_scale: 1.0,
        }
    }

    pub fn filtered_steps(setpoints: Vec<(f64, f64)>, t_filter: f64) -> Self {
        ReferenceProgram {
            kind: ReferenceKind::FilteredPiecewiseConstant,
            filter_time_constant: Some(t_filter),
            ..Self::steps(setpoints)
        }
    }

    pub fn joystick(source: JoystickSource, t_filter: f64, axis_scale: f64) -> Self {
        ReferenceProgram {
            kind: ReferenceKind::FilteredJoystick,
            setpoints: Vec::new(),
            filter_time_constant: Some(t_filter),
            joystick: Some(source),
            axis_scale,
        }
    }

    pub fn is_filtered(&self) -> bool {
        self.kind != ReferenceKind::PiecewiseConstant
    }

    pub fn validate(&self, duration: f64) -> Result<()> {
        if self.kind == ReferenceKind::FilteredJoystick {
            if self.joystick.is_none() {
                return Err(Error::config("reference.joystick", "joystick reference needs a source"));
            }
            if !self.axis_scale.is_finite() {
                return Err(Error::config("reference.axis_scale", "must be finite"));
            }
        } else {
            if self.setpoints.is_empty() || self.setpoints[0].0 != 0.0 {
                return Err(Error::config("reference.setpoints", "setpoints must start at t=0"));
            }
            for (i, w) in self.setpoints.windows(2).enumerate() {
                if !(w[1].0 > w[0].0) {
                    return Err(Error::config(
                        format!("reference.setpoints[{}]", i + 1),
                        "setpoint times must be strictly increasing",
                    ));
                }
            }
            for (i, (t, v)) in self.setpoints.iter().enumerate() {
                if *t > duration || !v.is_finite() {
                    return Err(Error::config(
                        format!("reference.setpoints[{i}]"),
                        format!("({t}, {v}) does not fit in [0, {duration}]"),
                    ));
                }
            }
        }
        if self.is_filtered() {
            match self.filter_time_constant {
                Some(t) if t > 0.0 && t.is_finite() => {}
                _ => {
                    return Err(Error::config(
                        "reference.filter_time_constant",
                        "filtered references need T > 0",
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Piecewise-constant joystick recording, axis values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JoystickTrace {
    samples: Vec<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    t_seconds: f64,
    axis_value: f64,
}

impl JoystickTrace {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for (i, row) in reader.deserialize::<TraceRow>().enumerate() {
            let row = row.map_err(|e| Error::config(format!("{origin}:row {}", i + 1), e.to_string()))?;
            let at = || format!("{origin}:row {}", i + 1);
            if !(row.t_seconds >= 0.0 && row.t_seconds.is_finite()) {
                return Err(Error::config(at(), "time must be non-negative"));
            }
            if let Some(&(last, _)) = samples.last() {
                if row.t_seconds <= last {
                    return Err(Error::config(at(), "times must be strictly increasing"));
                }
            }
            if !(-1.0..=1.0).contains(&row.axis_value) {
                return Err(Error::config(at(), format!("axis {} outside [-1, 1]", row.axis_value)));
            }
            samples.push((row.t_seconds, row.axis_value));
        }
        if samples.is_empty() {
            return Err(Error::config(origin, "trace has no samples"));
        }
        Ok(JoystickTrace { samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn embedded(name: &str) -> Result<Self> {
        match name {
            JOYSTICK_SESSION => Self::parse(JOYSTICK_SESSION_CSV, JOYSTICK_SESSION),
            other => Err(Error::config("reference.joystick.embedded", format!("no embedded trace `{other}`"))),
        }
    }

    pub fn resolve(source: &JoystickSource) -> Result<Option<Self>> {
        match source {
            JoystickSource::Embedded(name) => Self::embedded(name).map(Some),
            JoystickSource::RecordedTrace(path) => Self::load(path).map(Some),
            JoystickSource::Live => Ok(None),
        }
    }

    /// Held axis value at `t`; 0 before the first sample.
    pub fn axis_at(&self, t: f64) -> f64 {
        let n = self.samples.partition_point(|&(ts, _)| ts <= t + TIME_EPS);
        if n == 0 {
            0.0
        } else {
            self.samples[n - 1].1
        }
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.0)
    }
}

fn step_value(setpoints: &[(f64, f64)], t: f64) -> f64 {
    let n = setpoints.partition_point(|&(ts, _)| ts <= t + TIME_EPS);
    setpoints[n.saturating_sub(1)].1
}

enum Input {
    Steps(Vec<(f64, f64)>),
    Trace(JoystickTrace, f64),
    Live(Option<Arc<JoystickCell>>, f64),
}

impl Input {
    fn value_at(&self, t: f64) -> f64 {
        match self {
            Input::Steps(s) => step_value(s, t),
            Input::Trace(trace, scale) => scale * trace.axis_at(t),
            Input::Live(cell, scale) => scale * cell.as_ref().map_or(0.0, |c| c.get()),
        }
    }
}

/// Critically damped `1/(T s + 1)^2` filter, state `[x1, x2]`, output `x2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFilter {
    pub t_filter: f64,
    pub x: [f64; 2],
}

impl ReferenceFilter {
    pub fn new(t_filter: f64) -> Self {
        ReferenceFilter { t_filter, x: [0.0; 2] }
    }

    /// Exact response over `h` seconds to the constant input `r`.
    pub fn step(&mut self, r: f64, h: f64) {
        if h <= 0.0 {
            return;
        }
        let decay = (-h / self.t_filter).exp();
        let z1 = self.x[0] - r;
        let z2 = self.x[1] - r;
        self.x = [r + decay * z1, r + decay * (z2 + h / self.t_filter * z1)];
    }

    pub fn output(&self) -> f64 {
        self.x[1]
    }

    pub fn derivative(&self) -> f64 {
        (self.x[0] - self.x[1]) / self.t_filter
    }
}

/// Produces `(y_star, y_star_dot)` at monotonically increasing ticks. The
/// filter input is the raw signal read at the previous tick, held until the
/// current one.
pub struct ReferenceGenerator {
    input: Input,
    filter: Option<ReferenceFilter>,
    duration: f64,
    last: Option<(f64, f64)>,
}

impl ReferenceGenerator {
    pub fn new(program: &ReferenceProgram, duration: f64, live: Option<Arc<JoystickCell>>) -> Result<Self> {
        program.validate(duration)?;
        let input = match program.kind {
            ReferenceKind::FilteredJoystick => {
                let source = program.joystick.as_ref().expect("validated");
                match JoystickTrace::resolve(source)? {
                    Some(trace) => Input::Trace(trace, program.axis_scale),
                    None => Input::Live(live, program.axis_scale),
                }
            }
            _ => Input::Steps(program.setpoints.clone()),
        };
        let filter = program
            .is_filtered()
            .then(|| ReferenceFilter::new(program.filter_time_constant.expect("validated")));
        Ok(ReferenceGenerator {
            input,
            filter,
            duration,
            last: None,
        })
    }

    pub fn reference_at(&mut self, t: f64) -> Result<(f64, f64)> {
        if !(t >= -TIME_EPS && t <= self.duration + TIME_EPS) {
            return Err(Error::OutOfRange {
                t,
                duration: self.duration,
            });
        }
        if let Some((last_t, _)) = self.last {
            if t < last_t {
                return Err(Error::NonMonotonic { t, last: last_t });
            }
        }
        let Some(filter) = self.filter.as_mut() else {
            let v = self.input.value_at(t);
            self.last = Some((t, v));
            return Ok((v, 0.0));
        };
        if let Some((last_t, held)) = self.last {
            filter.step(held, t - last_t);
        }
        self.last = Some((t, self.input.value_at(t)));
        Ok((filter.output(), filter.derivative()))
    }

    /// Raw (unfiltered) signal at the last evaluated tick.
    pub fn raw(&self) -> f64 {
        self.last.map_or(0.0, |(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerSpec {
    Ip {
        alpha: f64,
        kp: f64,
        tau: f64,
        #[serde(default)]
        estimator: EstimatorKind,
    },
    Pi(PiGains),
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::Ip { .. } => "ip",
            ControllerSpec::Pi(_) => "pi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    #[serde(default)]
    pub description: String,
    pub sampling_period: f64,
    pub duration: f64,
    #[serde(default = "one_usize")]
    pub substeps: usize,
    #[serde(default)]
    pub initial_y: f64,
    pub seed: u64,
    /// Noise power; the sample variance is `noise_power / sampling_period`.
    #[serde(default)]
    pub noise_power: f64,
    pub plant: PlantModel,
    pub controller: ControllerSpec,
    pub reference: ReferenceProgram,
    #[serde(default)]
    pub faults: FaultSpec,
}

impl ScenarioSpec {
    /// Number of plant steps; telemetry has one more row.
    pub fn ticks(&self) -> usize {
        (self.duration / self.sampling_period).round() as usize
    }

    pub fn tick_time(&self, k: usize) -> f64 {
        k as f64 * self.sampling_period
    }

    /// Noise uses stream 0 of the scenario seed, the loss injector streams
    /// 1 and 2, so the two never overlap.
    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            power: self.noise_power,
            seed: self.seed,
        }
    }

    pub fn loss_model(&self) -> Result<LossModel> {
        build_schedule(&self.faults, self.duration, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::config("id", "scenario id is empty"));
        }
        let ts = self.sampling_period;
        if !(ts > 0.0 && ts.is_finite()) {
            return Err(Error::config("sampling_period", "must be positive"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::config("duration", "must be positive"));
        }
        let ratio = self.duration / ts;
        if (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
            return Err(Error::config(
                "duration",
                format!("{} is not a multiple of the sampling period {ts}", self.duration),
            ));
        }
        if self.substeps == 0 {
            return Err(Error::config("substeps", "must be at least 1"));
        }
        if !(self.noise_power >= 0.0 && self.noise_power.is_finite()) {
            return Err(Error::config("noise_power", "must be non-negative"));
        }
        self.plant.validate()?;
        if let PlantModel::Tank(p) = &self.plant {
            if let Some((t, _)) = p.valve_schedule.0.iter().find(|(t, _)| *t > self.duration) {
                return Err(Error::config("plant.valve_schedule", format!("breakpoint {t} after the run ends")));
            }
        }
        match &self.controller {
            ControllerSpec::Ip { alpha, kp, tau, .. } => {
                IpGains { alpha: *alpha, kp: *kp }.validate()?;
                if !(*tau >= ts && tau.is_finite()) {
                    return Err(Error::config("controller.tau", "window must cover at least one sampling period"));
                }
            }
            ControllerSpec::Pi(g) => g.validate()?,
        }
        self.reference.validate(self.duration)?;
        self.loss_model()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct File<'a> {
            scenario: [&'a ScenarioSpec; 1],
        }
        toml::to_string(&File { scenario: [self] }).map_err(|e| Error::config(self.id.clone(), e.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct ScenarioFile {
    #[serde(default)]
    scenario: Vec<ScenarioSpec>,
}

/// Parses and validates every `[[scenario]]` table of a TOML document.
pub fn parse_scenarios(text: &str, origin: &str) -> Result<Vec<ScenarioSpec>> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::config(origin, e.to_string()))?;
    if file.scenario.is_empty() {
        return Err(Error::config(origin, "no [[scenario]] tables"));
    }
    for (i, s) in file.scenario.iter().enumerate() {
        s.validate().map_err(|e| match e {
            Error::Config { path, msg } => Error::config(format!("{origin}: scenario[{i}].{path}"), msg),
            other => other,
        })?;
    }
    Ok(file.scenario)
}

pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioSpec>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenarios(&text, &path.display().to_string())
}

pub const TANK_SAMPLING: f64 = 0.1;
pub const TANK_DURATION: f64 = 200.0;
pub const TANK_NOISE_POWER: f64 = 0.025;
pub const TANK_ALPHA: f64 = 0.1;
pub const TANK_KP: f64 = 0.5;
pub const TANK_TAU: f64 = 3.0;
pub const TANK_REFERENCE_T: f64 = 3.0;
pub const TANK_PI_VALVE: f64 = 30.0;
pub const PI_KP: f64 = 29.69;
pub const PI_KI: f64 = 2.27009;

pub const AERO_SAMPLING: f64 = 0.01;
pub const AERO_DURATION: f64 = 250.0;
pub const AERO_ALPHA: f64 = 5.0;
pub const AERO_KP: f64 = -10.0;
pub const AERO_TAU: f64 = 0.5;
pub const AERO_NOISE_POWER: f64 = 4e-8;
pub const AERO_REFERENCE_T: f64 = 2.0;
pub const AERO_SQUARE_AMPLITUDE: f64 = 0.5;
pub const AERO_SQUARE_PERIOD: f64 = 50.0;
pub const JOYSTICK_AXIS_SCALE: f64 = 0.5;

pub const DEFAULT_SEED: u64 = 1;

pub fn tank_setpoints() -> Vec<(f64, f64)> {
    vec![(0.0, 0.0), (10.0, 15.0), (80.0, 40.0), (100.0, 55.0), (130.0, 10.0), (180.0, 0.0)]
}

fn aero_square() -> Vec<(f64, f64)> {
    let half = AERO_SQUARE_PERIOD / 2.0;
    let n = (AERO_DURATION / half).round() as usize;
    (0..n)
        .map(|i| {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            (i as f64 * half, sign * AERO_SQUARE_AMPLITUDE)
        })
        .collect()
}

fn aero_cuts() -> Vec<CutWindow> {
    vec![
        CutWindow { direction: Direction::PlantToServer, start: 60.0, end: 80.0 },
        CutWindow { direction: Direction::ServerToPlant, start: 110.0, end: 130.0 },
        CutWindow { direction: Direction::PlantToServer, start: 160.0, end: 180.0 },
    ]
}

fn tank(id: &str, description: &str, faults: FaultSpec) -> ScenarioSpec {
    ScenarioSpec {
        id: id.into(),
        description: description.into(),
        sampling_period: TANK_SAMPLING,
        duration: TANK_DURATION,
        substeps: 1,
        initial_y: 0.0,
        seed: DEFAULT_SEED,
        noise_power: TANK_NOISE_POWER,
        plant: PlantModel::Tank(TankParams::default()),
        controller: ControllerSpec::Ip {
            alpha: TANK_ALPHA,
            kp: TANK_KP,
            tau: TANK_TAU,
            estimator: EstimatorKind::Integral,
        },
        reference: ReferenceProgram::filtered_steps(tank_setpoints(), TANK_REFERENCE_T),
        faults,
    }
}

fn tank_pi(id: &str, description: &str, faults: FaultSpec) -> ScenarioSpec {
    let p = TankParams {
        valve_schedule: ValveSchedule::constant(TANK_PI_VALVE),
        ..TankParams::default()
    };
    ScenarioSpec {
        plant: PlantModel::Tank(p.clone()),
        controller: ControllerSpec::Pi(PiGains {
            kp: PI_KP,
            ki: PI_KI,
            u_min: p.u_min,
            u_max: p.u_max,
            anti_windup: true,
        }),
        ..tank(id, description, faults)
    }
}

fn aero(id: &str, description: &str, reference: ReferenceProgram, faults: FaultSpec) -> ScenarioSpec {
    ScenarioSpec {
        id: id.into(),
        description: description.into(),
        sampling_period: AERO_SAMPLING,
        duration: AERO_DURATION,
        substeps: 1,
        initial_y: 0.0,
        seed: DEFAULT_SEED,
        noise_power: AERO_NOISE_POWER,
        plant: PlantModel::Aero(AeroParams::default()),
        controller: ControllerSpec::Ip {
            alpha: AERO_ALPHA,
            kp: AERO_KP,
            tau: AERO_TAU,
            estimator: EstimatorKind::Integral,
        },
        reference,
        faults,
    }
}

fn joystick(id: &str, description: &str, t_filter: f64, faults: FaultSpec) -> ScenarioSpec {
    let reference = ReferenceProgram::joystick(
        JoystickSource::Embedded(JOYSTICK_SESSION.into()),
        t_filter,
        JOYSTICK_AXIS_SCALE,
    );
    aero(id, description, reference, faults)
}

/// Every built-in scenario.
pub fn catalog() -> Vec<ScenarioSpec> {
    let square = || ReferenceProgram::filtered_steps(aero_square(), AERO_REFERENCE_T);
    let tank_cuts = || {
        FaultSpec::cuts(vec![
            CutWindow { direction: Direction::ServerToPlant, start: 50.0, end: 60.0 },
            CutWindow { direction: Direction::PlantToServer, start: 140.0, end: 150.0 },
        ])
    };
    vec![
        tank("tank-1", "tank, MFC, no packet loss", FaultSpec::none()),
        tank("tank-2", "tank, MFC, fault 2 on [50,60) s and fault 1 on [140,150) s", tank_cuts()),
        tank("tank-3", "tank, MFC, 30% loss each direction", FaultSpec::bernoulli(0.30, 0.30)),
        tank("tank-4", "tank, MFC, 50% loss each direction", FaultSpec::bernoulli(0.50, 0.50)),
        tank("tank-5", "tank, MFC, 70% loss each direction", FaultSpec::bernoulli(0.70, 0.70)),
        tank_pi("tank-2-pi", "tank, PI, valve fixed at 30, faults of tank-2", tank_cuts()),
        tank_pi("tank-5-pi", "tank, PI, valve fixed at 30, 70% loss each direction", FaultSpec::bernoulli(0.70, 0.70)),
        aero("aero-1", "half quadrotor, two fault-1 cuts and one fault-2 cut", square(), FaultSpec::cuts(aero_cuts())),
        aero("aero-2", "half quadrotor, 24.02% fault 1, 24.85% fault 2", square(), FaultSpec::bernoulli(0.2402, 0.2485)),
        aero("aero-3", "half quadrotor, 39.27004% fault 1, 39.64% fault 2", square(), FaultSpec::bernoulli(0.3927004, 0.3964)),
        joystick("joy-4", "joystick reference, T = 4 s", 4.0, FaultSpec::none()),
        joystick("joy-5", "joystick reference, T = 2 s", 2.0, FaultSpec::none()),
        joystick("joy-6", "joystick reference, T = 0.5 s", 0.5, FaultSpec::none()),
        joystick("joy-7", "joystick reference, T = 2 s, two fault-1 cuts and one fault-2 cut", 2.0, FaultSpec::cuts(aero_cuts())),
        joystick("joy-8", "joystick reference, T = 2 s, 23.56% fault 1, 25.27% fault 2", 2.0, FaultSpec::bernoulli(0.2356, 0.2527)),
        joystick("joy-9", "joystick reference, T = 2 s, 38.79% fault 1, 40.50% fault 2", 2.0, FaultSpec::bernoulli(0.3879, 0.4050)),
    ]
}

pub fn find(id: &str) -> Option<ScenarioSpec> {
    catalog().into_iter().find(|s| s.id == id)
}
