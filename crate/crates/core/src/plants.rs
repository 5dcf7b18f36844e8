//! Simulated processes: the single tank and a 1-DOF pitch surrogate of a
//! half-quadrotor, each with zero-order hold of the received control and
//! additive measurement noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise-constant outlet valve opening: `(t_start, value)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValveSchedule(pub Vec<(f64, f64)>);

impl ValveSchedule {
    pub fn constant(k: f64) -> Self {
        ValveSchedule(vec![(0.0, k)])
    }

    pub fn at(&self, t: f64) -> f64 {
        self.0
            .iter()
            .take_while(|(start, _)| *start <= t)
            .last()
            .or(self.0.first())
            .map(|(_, k)| *k)
            .unwrap_or(0.0)
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        if self.0.is_empty() || self.0[0].0 != 0.0 {
            return Err(Error::config(path, "valve schedule must start at t=0"));
        }
        if self.0.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config(path, "valve breakpoints must be strictly increasing"));
        }
        if let Some((_, k)) = self.0.iter().find(|(_, k)| !(*k > 0.0 && *k < 100.0)) {
            return Err(Error::config(path, format!("valve opening {k} outside (0, 100)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankParams {
    pub outflow_coeff: f64,
    pub volume_divisor: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub valve_schedule: ValveSchedule,
}

impl Default for TankParams {
    fn default() -> Self {
        TankParams {
            outflow_coeff: 0.2700,
            volume_divisor: 5.0,
            y_min: 0.0,
            y_max: 60.0,
            u_min: 0.0,
            u_max: 70.0,
            valve_schedule: ValveSchedule(vec![(0.0, 10.0), (30.0, 50.0), (120.0, 20.0)]),
        }
    }
}

/// `dy/dt = (u - c K sqrt(y)) / divisor`; negative levels are read as empty.
pub fn tank_derivative(y: f64, u: f64, valve_k: f64, p: &TankParams) -> f64 {
    (u - p.outflow_coeff * valve_k * y.max(0.0).sqrt()) / p.volume_divisor
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeroParams {
    pub inertia: f64,
    pub damping: f64,
    pub stiffness: f64,
    /// Torque per volt of half the motor voltage difference. Negative: a
    /// positive command pitches the arm toward negative angles.
    pub torque_gain: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub bias_volts: f64,
}

impl Default for AeroParams {
    fn default() -> Self {
        AeroParams {
            inertia: 0.02,
            damping: 0.05,
            stiffness: 0.3,
            torque_gain: -0.01,
            v_min: -24.0,
            v_max: 24.0,
            bias_volts: 10.0,
        }
    }
}

/// Maps the scalar control onto the two motor voltages, then saturates.
/// `u = 0` takes the positive branch.
pub fn aero_voltage_map(u: f64, p: &AeroParams) -> (f64, f64) {
    let (v1, v2) = if u >= 0.0 {
        (p.bias_volts + u, -p.bias_volts - u)
    } else {
        (-p.bias_volts + u, p.bias_volts - u)
    };
    (v1.clamp(p.v_min, p.v_max), v2.clamp(p.v_min, p.v_max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantModel {
    Tank(TankParams),
    Aero(AeroParams),
}

impl PlantModel {
    pub fn name(&self) -> &'static str {
        match self {
            PlantModel::Tank(_) => "tank",
            PlantModel::Aero(_) => "aero",
        }
    }

    /// Range of the scalar control the actuator can realise.
    pub fn u_limits(&self) -> (f64, f64) {
        match self {
            PlantModel::Tank(p) => (p.u_min, p.u_max),
            // beyond these the voltages saturate
            PlantModel::Aero(p) => (p.v_min + p.bias_volts, p.v_max - p.bias_volts),
        }
    }

    pub fn initial_state(&self, y0: f64) -> PlantState {
        let x = match self {
            PlantModel::Tank(p) => vec![y0.clamp(p.y_min, p.y_max)],
            PlantModel::Aero(_) => vec![y0, 0.0],
        };
        PlantState { x, held_u: 0.0, t: 0.0 }
    }

    pub fn output(&self, state: &PlantState) -> f64 {
        state.x[0]
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PlantModel::Tank(p) => {
                if !(p.y_min < p.y_max) {
                    return Err(Error::config("plant.y_min", "y_min must be < y_max"));
                }
                if !(p.u_min < p.u_max) {
                    return Err(Error::config("plant.u_min", "u_min must be < u_max"));
                }
                if !(p.volume_divisor > 0.0) {
                    return Err(Error::config("plant.volume_divisor", "must be positive"));
                }
                p.valve_schedule.validate("plant.valve_schedule")
            }
            PlantModel::Aero(p) => {
                if !(p.inertia > 0.0) {
                    return Err(Error::config("plant.inertia", "must be positive"));
                }
                if !(p.damping >= 0.0) {
                    return Err(Error::config("plant.damping", "must be non-negative"));
                }
                if !(p.v_min < p.v_max) {
                    return Err(Error::config("plant.v_min", "v_min must be < v_max"));
                }
                Ok(())
            }
        }
    }

    fn derivative(&self, t0: f64, x: &[f64], u: f64, out: &mut [f64]) {
        match self {
            PlantModel::Tank(p) => {
                out[0] = tank_derivative(x[0], u, p.valve_schedule.at(t0), p);
            }
            PlantModel::Aero(p) => {
                let (v1, v2) = aero_voltage_map(u, p);
                let torque = p.torque_gain * (v1 - v2) / 2.0;
                out[0] = x[1];
                out[1] = (torque - p.damping * x[1] - p.stiffness * x[0]) / p.inertia;
            }
        }
    }

    fn project(&self, x: &mut [f64]) {
        if let PlantModel::Tank(p) = self {
            x[0] = x[0].clamp(p.y_min, p.y_max);
        }
    }
}

/// Continuous plant state plus the control currently held by the actuator.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub x: Vec<f64>,
    pub held_u: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Power spectral density of the band-limited white noise.
    pub power: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { power: 0.0, seed: 0 }
    }
}

/// Discrete realisation: Gaussian samples with variance `power / ts`.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    sigma: f64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(spec: NoiseSpec, ts: f64) -> Result<Self> {
        if !(spec.power >= 0.0) {
            return Err(Error::config("noise.power", "must be non-negative"));
        }
        if !(ts > 0.0) {
            return Err(Error::config("sampling_period", "must be positive"));
        }
        Ok(NoiseSource {
            sigma: (spec.power / ts).sqrt(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn sample(&mut self) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        self.sigma * z
    }
}

/// Latches a received control (clamped to the actuator range); with no packet
/// the previous value is held.
pub fn apply_control(model: &PlantModel, state: &PlantState, u_packet: Option<f64>) -> PlantState {
    let mut next = state.clone();
    if let Some(u) = u_packet.filter(|u| u.is_finite()) {
        let (lo, hi) = model.u_limits();
        next.held_u = u.clamp(lo, hi);
    }
    next
}

/// Advances the state by `dt` with `substeps` RK4 steps using the held control.
pub fn step_plant(model: &PlantModel, state: &PlantState, dt: f64, substeps: usize) -> Result<PlantState> {
    if !(dt > 0.0) {
        return Err(Error::config("sampling_period", "dt must be positive"));
    }
    let n = substeps.max(1);
    let h = dt / n as f64;
    let dim = state.x.len();
    let u = state.held_u;
    let mut x = state.x.clone();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; dim], vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]);
    let mut tmp = vec![0.0; dim];
    for i in 0..n {
        let t0 = state.t + i as f64 * h;
        model.derivative(t0, &x, u, &mut k1);
        for j in 0..dim {
            tmp[j] = x[j] + 0.5 * h * k1[j];
        }
        model.derivative(t0, &tmp, u, &mut k2);
        for j in 0..dim {
            tmp[j] = x[j] + 0.5 * h * k2[j];
        }
        model.derivative(t0, &tmp, u, &mut k3);
        for j in 0..dim {
            tmp[j] = x[j] + h * k3[j];
        }
        model.derivative(t0, &tmp, u, &mut k4);
        for j in 0..dim {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        model.project(&mut x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { t: t0 + h, state: x });
        }
    }
    Ok(PlantState {
        x,
        held_u: u,
        t: state.t + dt,
    })
}

/// A plant instance with its own noise stream.
#[derive(Debug, Clone)]
pub struct Plant {
    pub model: PlantModel,
    pub state: PlantState,
    noise: NoiseSource,
    substeps: usize,
}

impl Plant {
    pub fn new(model: PlantModel, y0: f64, noise: NoiseSource, substeps: usize) -> Result<Self> {
        model.validate()?;
        let state = model.initial_state(y0);
        Ok(Plant {
            model,
            state,
            noise,
            substeps: substeps.max(1),
        })
    }

    /// Returns `(true output, measured output)`.
    pub fn measure(&mut self) -> (f64, f64) {
        let y = self.model.output(&self.state);
        (y, y + self.noise.sample())
    }

    pub fn apply(&mut self, u_packet: Option<f64>) {
        self.state = apply_control(&self.model, &self.state, u_packet);
    }

    pub fn advance(&mut self, dt: f64) -> Result<()> {
        self.state = step_plant(&self.model, &self.state, dt, self.substeps)?;
        Ok(())
    }

    pub fn held_u(&self) -> f64 {
        self.state.held_u
    }
}
