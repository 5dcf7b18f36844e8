//! Model-free control over a lossy network: iP controller, plant models,
//! a UDP datagram transport with fault injection, scenario catalog, run
//! drivers, telemetry and QoS metrics, and a websocket bridge for displays.

pub mod bridge;
pub mod controller;
pub mod error;
pub mod faults;
pub mod metrics;
pub mod plants;
pub mod runner;
pub mod scenarios;
pub mod transport;

pub use controller::{EstimatorKind, IpController, IpGains, PiGains, PiState, Sample};
pub use error::{Error, Result};
pub use faults::{FaultCode, FaultLog, FaultSpec, TickOutcome};
pub use metrics::{compute_qos, emit_plots, QosReport, RunTelemetry, TelemetryRow};
pub use plants::{AeroParams, NoiseSpec, Plant, PlantModel, PlantState, TankParams};
pub use runner::{run, run_with, ControlServer, Mode, RunMode, RunOptions, ServerOutput};
pub use scenarios::{catalog, find, ReferenceProgram, ScenarioSpec};
pub use transport::{CutWindow, Datagram, Direction, Kind, LossInjector, LossModel, UdpEndpoint};
