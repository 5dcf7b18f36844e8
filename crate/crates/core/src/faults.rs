//! Fault programs for the scenarios and per-run fault accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::{CutWindow, Direction, LossModel};

/// How a single "x% packet loss, evenly distributed" figure maps onto the two
/// directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateReading {
    /// Each direction drops with the stated rate.
    #[default]
    PerDirection,
    /// The stated rate is a total, halved per direction.
    SplitTotal,
}

/// Fault description as written in a scenario.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(default)]
    pub fault1_rate: f64,
    #[serde(default)]
    pub fault2_rate: f64,
    #[serde(default)]
    pub cuts: Vec<CutWindow>,
    #[serde(default)]
    pub reading: RateReading,
}

impl FaultSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn bernoulli(fault1_rate: f64, fault2_rate: f64) -> Self {
        FaultSpec {
            fault1_rate,
            fault2_rate,
            ..Self::default()
        }
    }

    pub fn cuts(cuts: Vec<CutWindow>) -> Self {
        FaultSpec {
            cuts,
            ..Self::default()
        }
    }

    pub fn is_lossless(&self) -> bool {
        self.fault1_rate == 0.0 && self.fault2_rate == 0.0 && self.cuts.is_empty()
    }
}

pub fn build_schedule(spec: &FaultSpec, duration: f64, seed: u64) -> Result<LossModel> {
    for (name, p) in [("faults.fault1_rate", spec.fault1_rate), ("faults.fault2_rate", spec.fault2_rate)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config(name, format!("{p} is not a probability")));
        }
    }
    for (i, w) in spec.cuts.iter().enumerate() {
        if !(w.start >= 0.0 && w.start < w.end && w.end <= duration) {
            return Err(Error::config(
                format!("faults.cuts[{i}]"),
                format!("window [{}, {}) not inside [0, {duration}]", w.start, w.end),
            ));
        }
    }
    let scale = match spec.reading {
        RateReading::PerDirection => 1.0,
        RateReading::SplitTotal => 0.5,
    };
    Ok(LossModel {
        p_fault1: spec.fault1_rate * scale,
        p_fault2: spec.fault2_rate * scale,
        cut_windows: spec.cuts.clone(),
        seed,
    })
}

/// Per-tick fault label: 0 no loss, 1 measurement lost, 2 control lost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum FaultCode {
    #[default]
    None = 0,
    Fault1 = 1,
    Fault2 = 2,
}

impl FaultCode {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(FaultCode::None),
            1 => Some(FaultCode::Fault1),
            2 => Some(FaultCode::Fault2),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TickOutcome {
    pub measurement_dropped: bool,
    pub control_dropped: bool,
}

/// Measurement loss wins when both directions drop in the same tick.
pub fn fault_code(outcome: TickOutcome) -> FaultCode {
    if outcome.measurement_dropped {
        FaultCode::Fault1
    } else if outcome.control_dropped {
        FaultCode::Fault2
    } else {
        FaultCode::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DirectionTotals {
    pub sent: u64,
    pub dropped: u64,
}

impl DirectionTotals {
    pub fn rate(&self) -> f64 {
        if self.sent == 0 {
            0.0
        } else {
            self.dropped as f64 / self.sent as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FaultLog {
    pub events: Vec<(f64, FaultCode)>,
    pub totals: [DirectionTotals; 2],
}

impl FaultLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, t: f64, outcome: TickOutcome) -> FaultCode {
        self.count(Direction::PlantToServer, outcome.measurement_dropped);
        self.count(Direction::ServerToPlant, outcome.control_dropped);
        let code = fault_code(outcome);
        self.events.push((t, code));
        code
    }

    pub fn count(&mut self, direction: Direction, dropped: bool) {
        let tot = &mut self.totals[direction.index()];
        tot.sent += 1;
        tot.dropped += u64::from(dropped);
    }

    pub fn totals(&self, direction: Direction) -> DirectionTotals {
        self.totals[direction.index()]
    }

    pub fn realized_rate(&self, direction: Direction) -> f64 {
        self.totals(direction).rate()
    }
}
