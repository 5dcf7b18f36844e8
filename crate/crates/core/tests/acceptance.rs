//! Acceptance suite. One PASS/FAIL line per criterion; exits non-zero if any
//! criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mfcnet::controller::{estimate_f_integral, ip_control};
use mfcnet::faults::FaultSpec;
use mfcnet::metrics::{error_stats, saturation_intervals};
use mfcnet::plants::{step_plant, tank_derivative, ValveSchedule};
use mfcnet::scenarios::ReferenceFilter;
use mfcnet::transport::{decode, encode, DatagramSink, StreamState, MAX_SAMPLES};
use mfcnet::{
    find, run, Datagram, Direction, IpGains, Kind, LossInjector, LossModel, PlantModel, RunMode, RunTelemetry,
    Sample, ScenarioSpec, TankParams, TelemetryRow,
};

struct Outcome {
    pass: bool,
    detail: String,
    notes: Vec<String>,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into(), notes: Vec::new() }
}

impl Outcome {
    fn note(mut self, n: String) -> Self {
        self.notes.push(n);
        self
    }
}

fn lockstep(spec: &ScenarioSpec) -> RunTelemetry {
    run(spec, RunMode::lockstep()).unwrap_or_else(|e| panic!("{}: {e}", spec.id))
}

fn scenario(id: &str) -> ScenarioSpec {
    find(id).unwrap_or_else(|| panic!("{id} missing from the catalog"))
}

fn rmse(rows: &[TelemetryRow]) -> f64 {
    (rows.iter().map(|r| r.error().powi(2)).sum::<f64>() / rows.len() as f64).sqrt()
}

fn error_dynamics_oracle() -> Outcome {
    let started = Instant::now();
    let (ts, horizon, kp, alpha, valve): (f64, f64, f64, f64, f64) = (1e-3, 20.0, 0.5, 0.1, 10.0);
    let params = TankParams {
        valve_schedule: ValveSchedule::constant(valve),
        ..TankParams::default()
    };
    let model = PlantModel::Tank(params.clone());
    let gains = IpGains { alpha, kp };
    let y_star = 12.0;
    let mut state = model.initial_state(10.0);
    let e0 = state.x[0] - y_star;
    let mut worst: f64 = 0.0;
    let mut clamped = false;
    let n = (horizon / ts).round() as usize;
    for k in 0..=n {
        let t = k as f64 * ts;
        let y = state.x[0];
        let e = y - y_star;
        let bound = e0.abs() * (-kp * t).exp();
        worst = worst.max(e.abs() / bound);
        // true F of the ultra-local model is affine in u; solve the loop for it
        let f_at = |u: f64| tank_derivative(y, u, valve, &params) - alpha * u;
        let slope = f_at(1.0) - f_at(0.0);
        let u = -(f_at(0.0) + kp * e) / (alpha + slope);
        let f_true = f_at(u);
        let u_law = ip_control(f_true, &gains, 0.0, e).expect("finite");
        assert!((u_law - u).abs() <= 1e-9 * u.abs().max(1.0));
        clamped |= !(params.u_min..=params.u_max).contains(&u_law);
        state.held_u = u_law;
        state = step_plant(&model, &state, ts, 4).expect("stable");
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        worst <= 1.05 && !clamped && elapsed < 1.0,
        format!("max |e|/(|e0| e^-Kp t) = {worst:.5} (limit 1.05), unsaturated = {}, {elapsed:.3}s", !clamped),
    )
}

fn window(ts: f64, tau: f64, y: impl Fn(f64) -> f64, u: impl Fn(usize) -> f64) -> Vec<Sample> {
    let n = (tau / ts).round() as usize;
    (0..=n)
        .map(|k| {
            let t = k as f64 * ts;
            Sample { t, y: y(t), u: u(k), y_star_dot: 0.0, e: 0.0 }
        })
        .collect()
}

fn estimator_exactness() -> Outcome {
    let started = Instant::now();
    let (ts, tau) = (1e-3, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_ramp: f64 = 0.0;
    let mut worst_const: f64 = 0.0;
    for _ in 0..1000 {
        let a: f64 = rng.random_range(-10.0..=10.0);
        let b: f64 = rng.random_range(-10.0..=10.0);
        let f = estimate_f_integral(&window(ts, tau, |t| a + b * t, |_| 0.0), tau, 1.0).unwrap();
        worst_ramp = worst_ramp.max((f - b).abs() / b.abs());
        let c = estimate_f_integral(&window(ts, tau, |_| a, |_| 0.0), tau, 1.0).unwrap();
        worst_const = worst_const.max(c.abs() / (1e-9 * a.abs()));
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        worst_ramp <= 0.02 && worst_const < 1.0 && elapsed < 1.0,
        format!(
            "ramp rel err {worst_ramp:.2e} (limit 2e-2), constant |f|/(1e-9|a|) = {worst_const:.2e} (limit 1), {elapsed:.3}s"
        ),
    )
}

fn ultra_local_oracle() -> Outcome {
    let started = Instant::now();
    let (ts, tau, alpha, f): (f64, f64, f64, f64) = (1e-3, 0.1, 0.1, 3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = (tau / ts).round() as usize;
        // u[k] is held over the interval ending at sample k
        let u: Vec<f64> = (0..=n).map(|_| rng.random_range(-50.0..=50.0)).collect();
        let mut y = vec![rng.random_range(-5.0..=5.0)];
        for k in 1..=n {
            y.push(y[k - 1] + ts * (f + alpha * u[k]));
        }
        let samples = window(ts, tau, |t| y[(t / ts).round() as usize], |k| u[k]);
        let est = estimate_f_integral(&samples, tau, alpha).unwrap();
        worst = worst.max((est - f).abs() / f);
    }
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        worst <= 0.02 && elapsed < 1.0,
        format!("worst rel err {worst:.2e} over 200 random u sequences (limit 2e-2), {elapsed:.3}s"),
    )
}

/// Segments of the raw setpoint program, each judged after its reference has
/// come within 2% of the new setpoint.
fn segment_errors(spec: &ScenarioSpec, tel: &RunTelemetry) -> Vec<(f64, f64, f64)> {
    let pts = &spec.reference.setpoints;
    let mut out = Vec::new();
    for (i, &(start, value)) in pts.iter().enumerate() {
        let end = pts.get(i + 1).map_or(spec.duration, |p| p.0);
        let step = (value - if i == 0 { spec.initial_y } else { pts[i - 1].1 }).abs();
        let settled = tel
            .rows
            .iter()
            .filter(|r| r.t >= start && r.t < end)
            .find(|r| (r.y_star - value).abs() <= 0.02 * step)
            .map_or(end, |r| r.t);
        let stats = error_stats(&tel.rows, settled, end);
        out.push((start, end, stats.mean_abs));
    }
    out
}

fn tank1() -> Outcome {
    let started = Instant::now();
    let spec = scenario("tank-1");
    let tel = lockstep(&spec);
    let elapsed = started.elapsed().as_secs_f64();
    let mut ok = elapsed < 5.0;
    let mut parts = Vec::new();
    for (start, end, mean) in segment_errors(&spec, &tel) {
        if start >= 100.0 && end <= 130.0 {
            parts.push(format!("[{start},{end}) excluded"));
            continue;
        }
        ok &= mean <= 1.0;
        parts.push(format!("[{start},{end}) {mean:.3}"));
    }
    verdict(ok, format!("post-settling mean |e| (limit 1.0): {}; {elapsed:.2}s", parts.join(", ")))
        .note(saturation_note(&spec, &tel))
}

fn saturation_note(spec: &ScenarioSpec, tel: &RunTelemetry) -> String {
    let sat = saturation_intervals(&tel.rows, spec.plant.u_limits(), spec.sampling_period);
    let spans: Vec<String> = sat.iter().map(|(a, b)| format!("[{a:.1},{b:.1}]")).collect();
    format!("u at a bound for >1s during {}", spans.join(" "))
}

fn tank5_vs_pi() -> Outcome {
    let mut ratios = Vec::new();
    let mut unsaturated = Vec::new();
    for seed in [1, 2, 3] {
        let mut mfc = scenario("tank-5");
        let mut pi = scenario("tank-5-pi");
        mfc.seed = seed;
        pi.seed = seed;
        let (a, b) = (lockstep(&mfc), lockstep(&pi));
        ratios.push(rmse(&a.rows) / rmse(&b.rows));
        // the same comparison restricted to ticks where neither loop is saturated
        let sat_a = saturation_intervals(&a.rows, mfc.plant.u_limits(), mfc.sampling_period);
        let sat_b = saturation_intervals(&b.rows, pi.plant.u_limits(), pi.sampling_period);
        let free = |t: f64| !sat_a.iter().chain(&sat_b).any(|(s, e)| t >= *s && t <= *e);
        let keep = |rows: &[TelemetryRow]| rows.iter().filter(|r| free(r.t)).copied().collect::<Vec<_>>();
        unsaturated.push(rmse(&keep(&a.rows)) / rmse(&keep(&b.rows)));
    }
    let worst = ratios.iter().cloned().fold(0.0, f64::max);
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ");
    verdict(worst <= 0.5, format!("RMSE(MFC)/RMSE(PI) for seeds 1,2,3 = {} (limit 0.5)", fmt(&ratios)))
        .note(format!("same ratio outside saturation intervals: {}", fmt(&unsaturated)))
}

fn fault_semantics() -> Outcome {
    let tel = lockstep(&scenario("tank-2"));
    let window = |a: f64, b: f64| tel.rows.iter().filter(move |r| r.t >= a - 1e-9 && r.t < b - 1e-9);
    let held: Vec<_> = window(50.0, 60.0).collect();
    let frozen: Vec<_> = window(140.0, 150.0).collect();
    let u_held_const = held.iter().all(|r| r.u_held == held[0].u_held);
    let frozen_const = frozen
        .iter()
        .all(|r| r.f_est == frozen[0].f_est && r.u_commanded == frozen[0].u_commanded);
    let codes = held.iter().all(|r| r.fault_code == 2) && frozen.iter().all(|r| r.fault_code == 1);
    let elsewhere = tel.rows.iter().filter(|r| r.fault_code != 0).count() == held.len() + frozen.len();
    verdict(
        u_held_const && frozen_const && codes && elsewhere && held.len() == 100 && frozen.len() == 100,
        format!(
            "u_held constant on [50,60): {u_held_const}, (f_est,u_commanded) constant on [140,150): {frozen_const}, fault codes: {}",
            codes && elsewhere
        ),
    )
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let idx = ((v.len() - 1) as f64 * q).round() as usize;
    v[idx]
}

fn aero() -> Outcome {
    let spec = scenario("aero-1");
    let tel = lockstep(&spec);
    let mut ok = true;
    let mut parts = Vec::new();
    for w in &spec.faults.cuts {
        let before: Vec<f64> = tel
            .rows
            .iter()
            .filter(|r| r.t >= w.start - 20.0 && r.t < w.start)
            .map(|r| r.error().abs())
            .collect();
        let p95 = percentile(before, 0.95);
        let after: Vec<&TelemetryRow> = tel.rows.iter().filter(|r| r.t >= w.end && r.t <= w.end + 10.0).collect();
        // first tick from which |e| stays below the pre-cut p95 for the rest of the 10 s
        let last_above = after.iter().rposition(|r| r.error().abs() > p95);
        let recovered = match last_above {
            None => Some(0.0),
            Some(i) if i + 1 < after.len() => Some(after[i + 1].t - w.end),
            Some(_) => None,
        };
        ok &= recovered.is_some();
        parts.push(match recovered {
            Some(d) => format!("cut end {} back below p95={p95:.4} after {d:.2}s", w.end),
            None => format!("cut end {} not back below p95={p95:.4} within 10s", w.end),
        });
    }

    let mut clean = scenario("aero-3");
    clean.faults = FaultSpec::none();
    let lossy = lockstep(&scenario("aero-3"));
    let base = lockstep(&clean);
    let ratio = rmse(&lossy.rows) / rmse(&base.rows);
    ok &= ratio <= 2.0;
    parts.push(format!(
        "aero-3 RMSE {:.4} vs no-loss {:.4}, ratio {ratio:.3} (limit 2)",
        rmse(&lossy.rows),
        rmse(&base.rows)
    ));
    verdict(ok, parts.join("; "))
}

struct Collect(Vec<Datagram>);

impl DatagramSink for Collect {
    fn send_datagram(&mut self, d: &Datagram) -> mfcnet::Result<()> {
        self.0.push(d.clone());
        Ok(())
    }
}

fn transport() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let kinds = [Kind::Measurement, Kind::Control, Kind::Reference];
    let mut roundtrip = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(0..=MAX_SAMPLES);
        let d = Datagram {
            kind: kinds[rng.random_range(0..3)],
            seq: rng.random(),
            timestamp_us: rng.random(),
            payload: (0..n).map(|_| f64::from_bits(rng.random::<u64>())).collect(),
        };
        let back = decode(&encode(&d).unwrap()).unwrap();
        let same = back.kind == d.kind
            && back.seq == d.seq
            && back.timestamp_us == d.timestamp_us
            && back.payload.iter().map(|v| v.to_bits()).eq(d.payload.iter().map(|v| v.to_bits()));
        roundtrip += usize::from(same);
    }

    // adversary reorders within a small horizon and duplicates
    let mut seq_ok = true;
    for trial in 0..200 {
        let mut stream: Vec<u32> = (0..500).collect();
        for chunk in stream.chunks_mut(rng.random_range(2..12)) {
            chunk.shuffle(&mut rng);
        }
        let mut adversarial = Vec::new();
        for s in stream {
            adversarial.push(s);
            if rng.random_bool(0.2) {
                adversarial.push(s);
            }
        }
        let mut state = StreamState::new();
        let mut max: Option<u32> = None;
        let mut accepted = Vec::new();
        for s in &adversarial {
            let expect = max.is_none_or(|m| *s > m);
            let got = state.accept(&Datagram::new(Kind::Measurement, *s, 0.0, vec![]), None);
            seq_ok &= got == expect;
            if got {
                accepted.push(*s);
                max = Some(*s);
            }
        }
        seq_ok &= accepted.windows(2).all(|w| w[0] < w[1]);
        seq_ok &= state.accepted + state.rejected == adversarial.len() as u64;
        if !seq_ok {
            return verdict(false, format!("sequence discard broke on trial {trial}"));
        }
    }

    let mut worst_loss: f64 = 0.0;
    for p in [0.05, 0.3, 0.5, 0.7] {
        let mut inj = LossInjector::new(LossModel { p_fault1: p, p_fault2: p, cut_windows: vec![], seed: 11 });
        for dir in [Direction::PlantToServer, Direction::ServerToPlant] {
            let mut sink = Collect(Vec::new());
            for k in 0..10_000u32 {
                let d = Datagram::new(Kind::Measurement, k, k as f64 * 0.01, vec![0.0]);
                inj.send_with_loss(&mut sink, &d, dir, k as f64 * 0.01).unwrap();
            }
            let rate = 1.0 - sink.0.len() as f64 / 10_000.0;
            worst_loss = worst_loss.max((rate - p).abs());
        }
    }
    verdict(
        roundtrip == 10_000 && seq_ok && worst_loss <= 0.02,
        format!(
            "codec {roundtrip}/10000 round trips, seq discard {}, worst loss deviation {:.2} points (limit 2)",
            if seq_ok { "holds" } else { "broken" },
            worst_loss * 100.0
        ),
    )
}

fn determinism() -> Outcome {
    let mut spec = scenario("tank-3");
    spec.seed = 42;
    let a = lockstep(&spec).to_csv();
    let b = lockstep(&spec).to_csv();
    verdict(a == b, format!("tank-3 seed 42 CSVs of {} bytes, identical: {}", a.len(), a == b))
}

fn joystick_filter() -> Outcome {
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    for t_f in [0.5, 2.0, 4.0] {
        let mut filter = ReferenceFilter::new(t_f);
        let mut t = 0.0;
        for mult in [1.0, 2.0, 4.0] {
            let target = mult * t_f;
            while t < target - h / 2.0 {
                filter.step(1.0, h);
                t += h;
            }
            let analytic = 1.0 - (1.0 + target / t_f) * (-target / t_f).exp();
            worst = worst.max((filter.output() - analytic).abs());
        }
    }
    verdict(worst <= 1e-3, format!("worst |y - (1-(1+t/T)e^(-t/T))| = {worst:.2e} (limit 1e-3)"))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("error-dynamics oracle", error_dynamics_oracle),
        ("estimator exactness", estimator_exactness),
        ("estimator on ultra-local oracle", ultra_local_oracle),
        ("scenario tank-1", tank1),
        ("tank-5 MFC vs PI", tank5_vs_pi),
        ("fault semantics", fault_semantics),
        ("aero scenarios", aero),
        ("transport", transport),
        ("determinism", determinism),
        ("joystick filter", joystick_filter),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        for n in &o.notes {
            println!("  info: {n}");
        }
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
