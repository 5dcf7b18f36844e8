//! Telemetry, QoS measures and the plot/CSV artefacts of a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faults::FaultLog;
use crate::plants::{aero_voltage_map, PlantModel};
use crate::scenarios::{ReferenceKind, ScenarioSpec};
use crate::transport::Direction;

/// Build identifier baked in at compile time.
pub const BUILD: &str = env!("MFCNET_BUILD");

pub const CSV_COLUMNS: [&str; 8] = [
    "t",
    "y_true",
    "y_measured",
    "y_star",
    "u_commanded",
    "u_held",
    "f_est",
    "fault_code",
];

/// Minimum length of a run of bound-hitting controls that counts as
/// saturation.
pub const SATURATION_MIN_SECONDS: f64 = 1.0;
pub const SETTLING_BAND: f64 = 0.02;
pub const SETTLING_HOLD_SECONDS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub t: f64,
    pub y_true: f64,
    pub y_measured: f64,
    pub y_star: f64,
    pub u_commanded: f64,
    pub u_held: f64,
    pub f_est: f64,
    pub fault_code: u8,
}

impl TelemetryRow {
    pub fn error(&self) -> f64 {
        self.y_true - self.y_star
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTelemetry {
    pub scenario_id: String,
    pub seed: u64,
    pub build: String,
    pub mode: String,
    pub plant: PlantModel,
    pub sampling_period: f64,
    /// Flag overrides, recorded verbatim.
    pub overrides: Vec<(String, String)>,
    pub rows: Vec<TelemetryRow>,
    pub faults: FaultLog,
}

impl RunTelemetry {
    pub fn new(spec: &ScenarioSpec, mode: &str, overrides: Vec<(String, String)>) -> Self {
        RunTelemetry {
            scenario_id: spec.id.clone(),
            seed: spec.seed,
            build: BUILD.to_string(),
            mode: mode.to_string(),
            plant: spec.plant.clone(),
            sampling_period: spec.sampling_period,
            overrides,
            rows: Vec::with_capacity(spec.ticks() + 1),
            faults: FaultLog::new(),
        }
    }

    pub fn header(&self) -> Vec<(String, String)> {
        let mut h = vec![
            ("scenario".to_string(), self.scenario_id.clone()),
            ("seed".into(), self.seed.to_string()),
            ("build".into(), self.build.clone()),
            ("mode".into(), self.mode.clone()),
            ("plant".into(), self.plant.name().into()),
            ("sampling_period".into(), self.sampling_period.to_string()),
        ];
        for (k, v) in &self.overrides {
            h.push((format!("override.{k}"), v.clone()));
        }
        for (dir, name) in [
            (Direction::PlantToServer, "plant_to_server"),
            (Direction::ServerToPlant, "server_to_plant"),
        ] {
            let tot = self.faults.totals(dir);
            h.push((format!("sent.{name}"), tot.sent.to_string()));
            h.push((format!("dropped.{name}"), tot.dropped.to_string()));
        }
        h
    }

    /// `# key=value` header lines, then the column row and one row per tick.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.header() {
            let _ = writeln!(out, "# {k}={v}");
        }
        let mut w = csv::Writer::from_writer(out.into_bytes());
        w.write_record(CSV_COLUMNS).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.t.to_string(),
                r.y_true.to_string(),
                r.y_measured.to_string(),
                r.y_star.to_string(),
                r.u_commanded.to_string(),
                r.u_held.to_string(),
                r.f_est.to_string(),
                r.fault_code.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii")
    }
}

/// Telemetry read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryCsv {
    pub header: BTreeMap<String, String>,
    pub rows: Vec<TelemetryRow>,
}

pub fn parse_telemetry_csv(text: &str) -> Result<TelemetryCsv> {
    let mut header = BTreeMap::new();
    let mut body = 0;
    for line in text.lines() {
        let Some(rest) = line.strip_prefix('#') else { break };
        if let Some((k, v)) = rest.trim().split_once('=') {
            header.insert(k.to_string(), v.to_string());
        }
        body += line.len() + 1;
    }
    let mut reader = csv::Reader::from_reader(&text.as_bytes()[body.min(text.len())..]);
    let rows = reader
        .deserialize::<TelemetryRow>()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::config(format!("telemetry row {}", i + 1), e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok(TelemetryCsv { header, rows })
}

/// Error statistics of `y_true - y_star` over rows with `t0 <= t < t1`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub count: usize,
    pub mean_abs: f64,
    pub rmse: f64,
    pub max_abs: f64,
    pub p95_abs: f64,
}

pub fn error_stats(rows: &[TelemetryRow], t0: f64, t1: f64) -> ErrorStats {
    let mut abs: Vec<f64> = rows
        .iter()
        .filter(|r| r.t >= t0 && r.t < t1)
        .map(|r| r.error().abs())
        .collect();
    if abs.is_empty() {
        return ErrorStats::default();
    }
    let n = abs.len() as f64;
    let mean_abs = abs.iter().sum::<f64>() / n;
    let rmse = (abs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    abs.sort_by(f64::total_cmp);
    let max_abs = *abs.last().expect("non-empty");
    let rank = ((0.95 * n).ceil() as usize).clamp(1, abs.len());
    ErrorStats {
        count: abs.len(),
        mean_abs,
        rmse,
        max_abs,
        p95_abs: abs[rank - 1],
    }
}

/// Maximal runs `[start, end)` in which `u_commanded` sits on an actuator
/// bound for longer than [`SATURATION_MIN_SECONDS`]. `end` is the time of the
/// first row off the bound.
pub fn saturation_intervals(rows: &[TelemetryRow], limits: (f64, f64), ts: f64) -> Vec<(f64, f64)> {
    let at_bound = |u: f64| {
        let tol = |b: f64| 1e-9 * b.abs().max(1.0);
        (u - limits.0).abs() <= tol(limits.0) || (u - limits.1).abs() <= tol(limits.1)
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        if !at_bound(rows[i].u_commanded) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < rows.len() && at_bound(rows[j].u_commanded) {
            j += 1;
        }
        let start = rows[i].t;
        let end = rows.get(j).map_or(rows[j - 1].t + ts, |r| r.t);
        if end - start > SATURATION_MIN_SECONDS + 1e-9 {
            out.push((start, end));
        }
        i = j;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlingTime {
    pub step_time: f64,
    pub from: f64,
    pub to: f64,
    /// Seconds after the step; `None` when the output never settled inside
    /// the segment.
    pub settling_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QosReport {
    pub scenario_id: String,
    pub seed: u64,
    pub rmse_tracking: f64,
    pub iae: f64,
    pub max_abs_error_outside_saturation: f64,
    pub saturated_seconds: f64,
    pub settling_times: Vec<SettlingTime>,
    pub realized_loss_plant_to_server: f64,
    pub realized_loss_server_to_plant: f64,
}

impl QosReport {
    /// Flat `key: value` JSON object with stable keys.
    pub fn to_json(&self) -> String {
        let mut m = serde_json::Map::new();
        m.insert("scenario".into(), self.scenario_id.clone().into());
        m.insert("seed".into(), self.seed.into());
        m.insert("rmse_tracking".into(), self.rmse_tracking.into());
        m.insert("iae".into(), self.iae.into());
        m.insert(
            "max_abs_error_outside_saturation".into(),
            self.max_abs_error_outside_saturation.into(),
        );
        m.insert("saturated_seconds".into(), self.saturated_seconds.into());
        for s in &self.settling_times {
            m.insert(
                format!("settling_time_at_{}", s.step_time),
                s.settling_time.map_or(serde_json::Value::Null, Into::into),
            );
        }
        m.insert("realized_loss_plant_to_server".into(), self.realized_loss_plant_to_server.into());
        m.insert("realized_loss_server_to_plant".into(), self.realized_loss_server_to_plant.into());
        serde_json::to_string_pretty(&serde_json::Value::Object(m)).expect("json") + "\n"
    }
}

fn settling(rows: &[TelemetryRow], spec: &ScenarioSpec) -> Vec<SettlingTime> {
    if spec.reference.kind == ReferenceKind::FilteredJoystick {
        return Vec::new();
    }
    let sp = &spec.reference.setpoints;
    let mut out = Vec::new();
    for i in 1..sp.len() {
        let (t0, to) = sp[i];
        let from = sp[i - 1].1;
        let delta = (to - from).abs();
        if delta == 0.0 {
            continue;
        }
        let t_end = sp.get(i + 1).map_or(spec.duration, |s| s.0);
        let band = SETTLING_BAND * delta;
        let seg: Vec<&TelemetryRow> = rows.iter().filter(|r| r.t >= t0 - 1e-9 && r.t < t_end).collect();
        let mut found = None;
        let mut run_start: Option<f64> = None;
        for r in &seg {
            if (r.y_true - to).abs() < band {
                let s = *run_start.get_or_insert(r.t);
                if r.t - s >= SETTLING_HOLD_SECONDS - 1e-9 {
                    found = Some(s - t0);
                    break;
                }
            } else {
                run_start = None;
            }
        }
        out.push(SettlingTime {
            step_time: t0,
            from,
            to,
            settling_time: found,
        });
    }
    out
}

/// QoS of a run. Rows are sorted by time first, so the result does not depend
/// on row order.
pub fn compute_qos(tel: &RunTelemetry, spec: &ScenarioSpec) -> QosReport {
    let mut rows = tel.rows.clone();
    rows.sort_by(|a, b| a.t.total_cmp(&b.t));
    let n = rows.len().max(1) as f64;
    let rmse = (rows.iter().map(|r| r.error().powi(2)).sum::<f64>() / n).sqrt();
    let iae: f64 = rows
        .windows(2)
        .map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].error().abs() + w[1].error().abs()))
        .sum();
    let sat = saturation_intervals(&rows, spec.plant.u_limits(), spec.sampling_period);
    let inside = |t: f64| sat.iter().any(|&(a, b)| t >= a && t < b);
    let max_out = rows
        .iter()
        .filter(|r| !inside(r.t))
        .map(|r| r.error().abs())
        .fold(0.0, f64::max);
    QosReport {
        scenario_id: tel.scenario_id.clone(),
        seed: tel.seed,
        rmse_tracking: rmse,
        iae,
        max_abs_error_outside_saturation: max_out,
        saturated_seconds: sat.iter().map(|(a, b)| b - a).sum(),
        settling_times: settling(&rows, spec),
        realized_loss_plant_to_server: tel.faults.realized_rate(Direction::PlantToServer),
        realized_loss_server_to_plant: tel.faults.realized_rate(Direction::ServerToPlant),
    }
}

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
    step: bool,
}

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 320.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 36.0;
const MAX_POINTS: usize = 4000;

fn nice_range(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn decimate(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let stride = points.len().div_ceil(MAX_POINTS).max(1);
    let mut out: Vec<(f64, f64)> = points.iter().step_by(stride).copied().collect();
    if let (Some(&last), Some(&kept)) = (points.last(), out.last()) {
        if kept != last {
            out.push(last);
        }
    }
    out
}

fn render_panel(title: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (t0, t1) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = nice_range(
        all().map(|p| p.1).fold(f64::INFINITY, f64::min),
        all().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
    );
    let t1 = if t1 > t0 { t1 } else { t0 + 1.0 };
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |t: f64| MARGIN_L + (t - t0) / (t1 - t0) * pw;
    let sy = |y: f64| MARGIN_T + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" font-size="13">{title}</text>"#, MARGIN_L);
    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let t = t0 + f * (t1 - t0);
        let y = y0 + f * (y1 - y0);
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
            sx(t),
            HEIGHT - MARGIN_B + 14.0,
            fmt_tick(t)
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            MARGIN_L - 4.0,
            sy(y) + 4.0,
            fmt_tick(y)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_L}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            MARGIN_L + pw,
            sy(y),
            sy(y)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">t (s)</text>"#,
        MARGIN_L + pw / 2.0,
        HEIGHT - 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{:.1}" transform="rotate(-90 12 {:.1})" text-anchor="middle">{y_label}</text>"#,
        MARGIN_T + ph / 2.0,
        MARGIN_T + ph / 2.0
    );
    for (i, ser) in series.iter().enumerate() {
        let mut d = String::new();
        let mut prev: Option<(f64, f64)> = None;
        for &(t, y) in &decimate(&ser.points) {
            if ser.step {
                if let Some((_, py)) = prev {
                    let _ = write!(d, "{:.2},{:.2} ", sx(t), sy(py));
                }
            }
            let _ = write!(d, "{:.2},{:.2} ", sx(t), sy(y));
            prev = Some((t, y));
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            ser.color,
            d.trim_end()
        );
        let lx = MARGIN_L + pw - 150.0;
        let ly = MARGIN_T + 14.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            lx + 18.0,
            ly - 4.0,
            ly - 4.0,
            ser.color,
            lx + 24.0,
            ser.label
        );
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let r = (v * 100.0).round() / 100.0;
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

fn panels(tel: &RunTelemetry) -> Vec<(&'static str, String)> {
    let col = |f: fn(&TelemetryRow) -> f64| tel.rows.iter().map(|r| (r.t, f(r))).collect::<Vec<_>>();
    let sid = &tel.scenario_id;
    let output = render_panel(
        &format!("{sid}: output"),
        "y",
        &[
            Series { label: "output y", color: "#d62728", points: col(|r| r.y_true), step: false },
            Series { label: "reference y*", color: "#1f77b4", points: col(|r| r.y_star), step: false },
        ],
    );
    let fault = render_panel(
        &format!("{sid}: fault (0 none, 1 fault 1, 2 fault 2)"),
        "code",
        &[Series { label: "fault code", color: "#2ca02c", points: col(|r| r.fault_code as f64), step: true }],
    );
    let second = match &tel.plant {
        PlantModel::Tank(_) => (
            "control",
            render_panel(
                &format!("{sid}: control"),
                "u",
                &[
                    Series { label: "u applied", color: "#1f77b4", points: col(|r| r.u_held), step: true },
                    Series { label: "u commanded", color: "#ff7f0e", points: col(|r| r.u_commanded), step: true },
                ],
            ),
        ),
        PlantModel::Aero(p) => {
            let (v1, v2): (Vec<_>, Vec<_>) = tel
                .rows
                .iter()
                .map(|r| {
                    let (a, b) = aero_voltage_map(r.u_held, p);
                    ((r.t, a), (r.t, b))
                })
                .unzip();
            (
                "voltages",
                render_panel(
                    &format!("{sid}: supply voltages"),
                    "V",
                    &[
                        Series { label: "v1", color: "#1f77b4", points: v1, step: true },
                        Series { label: "v2", color: "#d62728", points: v2, step: true },
                    ],
                ),
            )
        }
    };
    vec![("output", output), second, ("fault", fault)]
}

/// Writes `<scenario>__<panel>.svg` for each panel and
/// `<scenario>__telemetry.csv`. Nothing is written for empty telemetry.
pub fn emit_plots(tel: &RunTelemetry, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if tel.rows.is_empty() {
        return Err(Error::Empty(format!("no telemetry rows for {}", tel.scenario_id)));
    }
    let mut files: Vec<(PathBuf, String)> = panels(tel)
        .into_iter()
        .map(|(name, svg)| (out_dir.join(format!("{}__{name}.svg", tel.scenario_id)), svg))
        .collect();
    files.push((out_dir.join(format!("{}__telemetry.csv", tel.scenario_id)), tel.to_csv()));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (path, body) in &files {
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}
