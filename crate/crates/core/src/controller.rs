//! Intelligent proportional (iP) controller over the first-order ultra-local
//! model `dy/dt = F + alpha * u`, the two sliding-window estimators of `F`,
//! and the PI baseline with conditional-integration anti-windup.
//!
//! Window samples carry the control that was held over the interval ending at
//! the sample (zero-order hold), so the `u` term of each kernel is integrated
//! exactly per interval while sampled signals use the trapezoidal rule. This
//! keeps the estimate consistent when samples are missing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when comparing window timestamps.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IpGains {
    pub alpha: f64,
    pub kp: f64,
}

impl IpGains {
    pub fn new(alpha: f64, kp: f64) -> Result<Self> {
        let gains = IpGains { alpha, kp };
        gains.validate()?;
        Ok(gains)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha == 0.0 {
            return Err(Error::config("controller.alpha", "alpha must be finite and non-zero"));
        }
        if !self.kp.is_finite() {
            return Err(Error::config("controller.kp", "kp must be finite"));
        }
        Ok(())
    }
}

/// The iP law: `u = -(f_est - y_star_dot + kp * e) / alpha`, unsaturated.
pub fn ip_control(f_est: f64, gains: &IpGains, y_star_dot: f64, e: f64) -> Result<f64> {
    if !(f_est.is_finite() && y_star_dot.is_finite() && e.is_finite()) {
        return Err(Error::ControllerFault(format!(
            "non-finite iP input (f_est={f_est}, y_star_dot={y_star_dot}, e={e})"
        )));
    }
    if gains.alpha == 0.0 {
        return Err(Error::ControllerFault("alpha is zero".into()));
    }
    let u = -(f_est - y_star_dot + gains.kp * e) / gains.alpha;
    if !u.is_finite() {
        return Err(Error::ControllerFault(format!("iP output is not finite: {u}")));
    }
    Ok(u)
}

/// One estimator window entry.
///
/// `u` is the control held over the interval that ends at `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub y: f64,
    pub u: f64,
    pub y_star_dot: f64,
    pub e: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Algebraic kernel integral over `(y, u)`.
    #[default]
    Integral,
    /// Closed-loop average of `y_star_dot - alpha u - kp e`.
    Loop,
}

/// A window segment in local coordinates `sigma in [0, tau]`.
struct Segment<'a> {
    s0: f64,
    s1: f64,
    a: Sampled,
    b: &'a Sample,
}

#[derive(Clone, Copy)]
struct Sampled {
    y: f64,
    y_star_dot: f64,
    e: f64,
}

impl From<&Sample> for Sampled {
    fn from(s: &Sample) -> Self {
        Sampled {
            y: s.y,
            y_star_dot: s.y_star_dot,
            e: s.e,
        }
    }
}

fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + w * (b - a)
}

fn segments(samples: &[Sample], tau: f64) -> Result<Vec<Segment<'_>>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config("controller.tau", "tau must be positive"));
    }
    let (first, last) = match (samples.first(), samples.last()) {
        (Some(f), Some(l)) if samples.len() >= 2 => (f, l),
        _ => return Err(Error::InsufficientData { span: 0.0, tau }),
    };
    let span = last.t - first.t;
    if span < tau * (1.0 - TIME_EPS) {
        return Err(Error::InsufficientData { span, tau });
    }
    let origin = last.t - tau;
    let mut out = Vec::with_capacity(samples.len());
    for pair in samples.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (mut s0, s1) = (a.t - origin, b.t - origin);
        if s1 <= 0.0 {
            continue;
        }
        let mut head = Sampled::from(a);
        if s0 < 0.0 {
            let w = -s0 / (s1 - s0);
            head = Sampled {
                y: lerp(a.y, b.y, w),
                y_star_dot: lerp(a.y_star_dot, b.y_star_dot, w),
                e: lerp(a.e, b.e, w),
            };
            s0 = 0.0;
        }
        out.push(Segment { s0, s1, a: head, b });
    }
    Ok(out)
}

/// Kernel integral estimate
/// `F = -(6/tau^3) * int_0^tau [(tau - 2s) y + alpha s (tau - s) u] ds`
/// evaluated over the trailing `tau` seconds of `samples`.
pub fn estimate_f_integral(samples: &[Sample], tau: f64, alpha: f64) -> Result<f64> {
    let segs = segments(samples, tau)?;
    // antiderivative of s (tau - s)
    let w = |s: f64| tau * s * s / 2.0 - s * s * s / 3.0;
    let (mut iy, mut iu) = (0.0, 0.0);
    for seg in &segs {
        let ka = tau - 2.0 * seg.s0;
        let kb = tau - 2.0 * seg.s1;
        iy += 0.5 * (seg.s1 - seg.s0) * (ka * seg.a.y + kb * seg.b.y);
        iu += seg.b.u * (w(seg.s1) - w(seg.s0));
    }
    Ok(-6.0 / (tau * tau * tau) * (iy + alpha * iu))
}

/// Closed-loop estimate `F = (1/tau) int (y_star_dot - alpha u - kp e) ds`.
/// Only meaningful while the loop is closed with the iP.
pub fn estimate_f_loop(samples: &[Sample], tau: f64, alpha: f64, kp: f64) -> Result<f64> {
    let segs = segments(samples, tau)?;
    let mut acc = 0.0;
    for seg in &segs {
        let h = seg.s1 - seg.s0;
        let fa = seg.a.y_star_dot - kp * seg.a.e;
        let fb = seg.b.y_star_dot - kp * seg.b.e;
        acc += 0.5 * h * (fa + fb) - alpha * seg.b.u * h;
    }
    Ok(acc / tau)
}

/// Running state of one iP controller instance.
#[derive(Debug, Clone)]
pub struct UltraLocalState {
    f_est: f64,
    window: VecDeque<Sample>,
    tau: f64,
    last_u: f64,
}

impl UltraLocalState {
    pub fn new(tau: f64, initial_f_est: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::config("controller.tau", "tau must be positive"));
        }
        Ok(UltraLocalState {
            f_est: initial_f_est,
            window: VecDeque::new(),
            tau,
            last_u: 0.0,
        })
    }

    /// Appends a sample and drops the ones no longer needed to cover `tau`.
    /// The oldest retained sample is the newest one at or before `t - tau`.
    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if let Some(last) = self.window.back() {
            if sample.t <= last.t {
                return Err(Error::NonMonotonic {
                    t: sample.t,
                    last: last.t,
                });
            }
        }
        let cutoff = sample.t - self.tau + TIME_EPS * self.tau.max(1.0);
        self.window.push_back(sample);
        while self.window.len() >= 2 && self.window[1].t <= cutoff {
            self.window.pop_front();
        }
        Ok(())
    }

    pub fn spans_window(&self) -> bool {
        match (self.window.front(), self.window.back()) {
            (Some(f), Some(l)) if self.window.len() >= 2 => {
                l.t - f.t >= self.tau * (1.0 - TIME_EPS)
            }
            _ => false,
        }
    }

    pub fn samples(&mut self) -> &[Sample] {
        self.window.make_contiguous()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn f_est(&self) -> f64 {
        self.f_est
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn last_u(&self) -> f64 {
        self.last_u
    }

    pub fn set_last_u(&mut self, u: f64) {
        self.last_u = u;
    }

    fn refresh(&mut self, kind: EstimatorKind, gains: &IpGains) -> Result<()> {
        if !self.spans_window() {
            return Ok(());
        }
        let tau = self.tau;
        let samples = self.window.make_contiguous();
        let f = match kind {
            EstimatorKind::Integral => estimate_f_integral(samples, tau, gains.alpha)?,
            EstimatorKind::Loop => estimate_f_loop(samples, tau, gains.alpha, gains.kp)?,
        };
        if f.is_finite() {
            self.f_est = f;
        }
        Ok(())
    }
}

/// iP controller bundle: gains, estimator choice, actuator limits and state.
#[derive(Debug, Clone)]
pub struct IpController {
    pub gains: IpGains,
    pub estimator: EstimatorKind,
    pub u_limits: (f64, f64),
    state: UltraLocalState,
}

impl IpController {
    pub fn new(
        gains: IpGains,
        estimator: EstimatorKind,
        tau: f64,
        u_limits: (f64, f64),
    ) -> Result<Self> {
        gains.validate()?;
        Ok(IpController {
            gains,
            estimator,
            u_limits,
            state: UltraLocalState::new(tau, 0.0)?,
        })
    }

    pub fn state(&self) -> &UltraLocalState {
        &self.state
    }

    /// Feeds a fresh measurement and returns the saturated control.
    ///
    /// On a controller fault the previous control is returned and the error
    /// is logged.
    pub fn update(&mut self, t: f64, y: f64, y_star: f64, y_star_dot: f64) -> Result<f64> {
        let e = y - y_star;
        self.state.push(Sample {
            t,
            y,
            u: self.state.last_u,
            y_star_dot,
            e,
        })?;
        if let Err(err) = self.state.refresh(self.estimator, &self.gains) {
            log::warn!("t={t}: estimator kept previous value: {err}");
        }
        let u = match ip_control(self.state.f_est, &self.gains, y_star_dot, e) {
            Ok(u) => u.clamp(self.u_limits.0, self.u_limits.1),
            Err(err) => {
                log::warn!("t={t}: holding u: {err}");
                self.state.last_u
            }
        };
        self.state.last_u = u;
        Ok(u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
    pub u_min: f64,
    pub u_max: f64,
    #[serde(default = "default_true")]
    pub anti_windup: bool,
}

fn default_true() -> bool {
    true
}

impl PiGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp.is_finite() && self.ki.is_finite()) {
            return Err(Error::config("controller.pi", "gains must be finite"));
        }
        if !(self.u_min < self.u_max) {
            return Err(Error::config("controller.pi", "u_min must be < u_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PiState {
    pub integral: f64,
    pub anti_windup_active: bool,
}

/// `u = clamp(kp e + ki int e)`. With anti-windup the integral only moves when
/// the raw output is inside the limits or `e` pulls it back inside.
pub fn pi_control(state: &mut PiState, gains: &PiGains, e: f64, dt: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::ControllerFault(format!("dt must be positive, got {dt}")));
    }
    if !e.is_finite() {
        return Err(Error::ControllerFault(format!("non-finite PI error {e}")));
    }
    let raw = gains.kp * e + gains.ki * state.integral;
    let push = gains.ki * e;
    let integrate = !gains.anti_windup
        || (gains.u_min..=gains.u_max).contains(&raw)
        || (raw > gains.u_max && push < 0.0)
        || (raw < gains.u_min && push > 0.0);
    state.anti_windup_active = !integrate;
    if integrate {
        state.integral += e * dt;
    }
    Ok(raw.clamp(gains.u_min, gains.u_max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn window(ts: f64, n: usize, y: impl Fn(f64) -> f64, u: impl Fn(f64) -> f64) -> Vec<Sample> {
        (0..=n)
            .map(|k| {
                let t = k as f64 * ts;
                Sample {
                    t,
                    y: y(t),
                    u: u(t),
                    y_star_dot: 0.0,
                    e: 0.0,
                }
            })
            .collect()
    }

    #[test]
    fn ip_zero_terms() {
        let g = IpGains::new(3.0, 1.0).unwrap();
        assert_eq!(ip_control(0.0, &g, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn ip_tank_gains() {
        let g = IpGains::new(0.1, 0.5).unwrap();
        let u = ip_control(1.0, &g, 0.5, 2.0).unwrap();
        assert!((u + 15.0).abs() < 1e-12, "{u}");
    }

    #[test]
    fn ip_aero_gains() {
        let g = IpGains::new(5.0, -10.0).unwrap();
        let u = ip_control(2.0, &g, 0.0, 0.1).unwrap();
        assert!((u + 0.2).abs() < 1e-12, "{u}");
    }

    #[test]
    fn ip_rejects_non_finite() {
        let g = IpGains::new(0.1, 0.5).unwrap();
        assert!(matches!(
            ip_control(f64::NAN, &g, 0.0, 0.0),
            Err(Error::ControllerFault(_))
        ));
        assert!(IpGains::new(0.0, 1.0).is_err());
    }

    #[test]
    fn integral_annihilates_constants() {
        let s = window(1e-3, 100, |_| 7.5, |_| 0.0);
        let f = estimate_f_integral(&s, 0.1, 0.1).unwrap();
        assert!(f.abs() <= 1e-9 * 7.5, "{f}");
    }

    #[test]
    fn integral_recovers_slope() {
        let s = window(1e-3, 100, |t| 2.0 - 4.0 * t, |_| 0.0);
        let f = estimate_f_integral(&s, 0.1, 0.1).unwrap();
        assert!((f + 4.0).abs() < 4.0 * 1e-3, "{f}");
    }

    #[test]
    fn integral_error_shrinks_with_step() {
        // sampled slope estimate of a quadratic-free signal is exact; use a sine
        // to see the discretisation error fall as the step shrinks
        let tau = 0.2;
        let exact_at = |ts: f64| {
            let n = (tau / ts).round() as usize;
            let s = window(ts, n, |t| (3.0 * t).sin(), |_| 0.0);
            estimate_f_integral(&s, tau, 1.0).unwrap()
        };
        let fine = exact_at(1e-5);
        let e1 = (exact_at(1e-2) - fine).abs();
        let e2 = (exact_at(5e-3) - fine).abs();
        assert!(e2 < e1, "{e1} {e2}");
    }

    #[test]
    fn integral_on_ultra_local_oracle() {
        // y integrated from dy/dt = 3 + 0.1 u with piecewise-constant u held
        // over each step, using 100 Euler substeps per sample
        let (ts, tau, alpha, f0) = (1e-3, 0.1, 0.1, 3.0);
        let n = 100;
        let mut seed = 12345u64;
        let mut next_u = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f64 / (1u64 << 31) as f64) * 20.0 - 10.0
        };
        let mut samples = Vec::new();
        let mut y = 1.0;
        let mut u_held = 0.0;
        samples.push(Sample { t: 0.0, y, u: u_held, y_star_dot: 0.0, e: 0.0 });
        for k in 1..=n {
            let u_next = next_u();
            let h = ts / 100.0;
            for _ in 0..100 {
                y += h * (f0 + alpha * u_next);
            }
            u_held = u_next;
            samples.push(Sample { t: k as f64 * ts, y, u: u_held, y_star_dot: 0.0, e: 0.0 });
        }
        let f = estimate_f_integral(&samples, tau, alpha).unwrap();
        assert!((f - f0).abs() < 0.02 * f0, "{f}");
    }

    #[test]
    fn short_window_is_insufficient() {
        let s = window(1e-3, 50, |_| 1.0, |_| 0.0);
        assert!(matches!(
            estimate_f_integral(&s, 0.1, 0.1),
            Err(Error::InsufficientData { .. })
        ));
        assert!(matches!(
            estimate_f_loop(&s[..1], 0.1, 0.1, 0.5),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn loop_estimator_trivial_cases() {
        let zero = window(0.01, 50, |_| 0.0, |_| 0.0);
        assert_eq!(estimate_f_loop(&zero, 0.5, 0.1, 0.5).unwrap(), 0.0);
        let ones: Vec<Sample> = zero.iter().map(|s| Sample { y_star_dot: 1.0, ..*s }).collect();
        for tau in [0.1, 0.25, 0.5] {
            let f = estimate_f_loop(&ones, tau, 0.1, 0.5).unwrap();
            assert!((f - 1.0).abs() < 1e-12, "{f}");
        }
    }

    #[test]
    fn left_edge_is_interpolated() {
        // irregular spacing: the segment (0, 0.35] straddles t - tau = 0.2 and
        // the one before it lies entirely outside the window
        let s = [
            Sample { t: -0.1, y: 5.0, u: 0.0, y_star_dot: 0.0, e: 0.0 },
            Sample { t: 0.0, y: 5.0, u: 100.0, y_star_dot: 0.0, e: 0.0 },
            Sample { t: 0.35, y: 5.0, u: 2.0, y_star_dot: 0.0, e: 0.0 },
            Sample { t: 0.5, y: 5.0, u: 2.0, y_star_dot: 0.0, e: 0.0 },
            Sample { t: 0.6, y: 5.0, u: 2.0, y_star_dot: 0.0, e: 0.0 },
        ];
        // constant y contributes nothing, constant u gives -alpha u
        let f = estimate_f_integral(&s, 0.4, 1.0).unwrap();
        assert!((f + 2.0).abs() < 1e-9, "{f}");
        let f = estimate_f_loop(&s, 0.4, 1.0, 0.5).unwrap();
        assert!((f + 2.0).abs() < 1e-9, "{f}");
    }

    #[test]
    fn state_window_invariants() {
        let ts = 0.1;
        let mut st = UltraLocalState::new(0.5, 0.0).unwrap();
        for k in 0..40 {
            st.push(Sample { t: k as f64 * ts, y: 1.0, u: 0.0, y_star_dot: 0.0, e: 0.0 })
                .unwrap();
            let s = st.samples();
            assert!(s.windows(2).all(|w| w[1].t > w[0].t));
            let span = s.last().unwrap().t - s[0].t;
            assert!(span <= 0.5 + ts + 1e-9, "{span}");
        }
        assert!(st.spans_window());
        assert!(st
            .push(Sample { t: 1.0, y: 0.0, u: 0.0, y_star_dot: 0.0, e: 0.0 })
            .is_err());
    }

    #[test]
    fn f_est_holds_initial_until_window_fills() {
        let g = IpGains::new(0.1, 0.5).unwrap();
        let mut c = IpController::new(g, EstimatorKind::Integral, 0.5, (0.0, 70.0)).unwrap();
        for k in 0..5 {
            c.update(k as f64 * 0.1, 10.0 + k as f64, 10.0, 0.0).unwrap();
            assert_eq!(c.state().f_est(), 0.0);
        }
        c.update(0.5, 15.0, 10.0, 0.0).unwrap();
        assert!(c.state().f_est() != 0.0);
    }

    #[test]
    fn pi_examples() {
        let g = PiGains { kp: 29.69, ki: 2.27009, u_min: 0.0, u_max: 70.0, anti_windup: true };
        let mut st = PiState::default();
        assert_eq!(pi_control(&mut st, &g, 0.0, 0.1).unwrap(), 0.0);
        let mut st = PiState::default();
        let u = pi_control(&mut st, &g, 1.0, 0.1).unwrap();
        assert!((u - 29.69).abs() < 1e-12);
        assert!(pi_control(&mut st, &g, 1.0, 0.0).is_err());
    }

    #[test]
    fn pi_integral_stops_when_saturated() {
        let g = PiGains { kp: 1.0, ki: 1.0, u_min: 0.0, u_max: 70.0, anti_windup: true };
        let mut st = PiState::default();
        let mut frozen_from = None;
        for k in 0..100 {
            let before = st.integral;
            let u = pi_control(&mut st, &g, 10.0, 0.1).unwrap();
            assert!(u <= 70.0);
            let raw = g.kp * 10.0 + g.ki * before;
            if raw > 70.0 {
                assert_eq!(st.integral, before, "step {k}");
                assert!(st.anti_windup_active);
                frozen_from.get_or_insert(k);
            }
        }
        assert!(frozen_from.is_some());
        assert!(st.integral <= 61.0 + 1e-9, "{}", st.integral);
        // error reversal unwinds immediately
        let before = st.integral;
        pi_control(&mut st, &g, -1.0, 0.1).unwrap();
        assert!(st.integral < before);
    }

    #[test]
    fn pi_without_anti_windup_winds_up() {
        let g = PiGains { kp: 1.0, ki: 1.0, u_min: 0.0, u_max: 70.0, anti_windup: false };
        let mut st = PiState::default();
        for _ in 0..1000 {
            pi_control(&mut st, &g, 10.0, 0.1).unwrap();
        }
        assert!(st.integral > 999.0);
    }

    proptest! {
        #[test]
        fn ip_is_linear(f1 in -50.0..50.0f64, d1 in -5.0..5.0f64, e1 in -20.0..20.0f64,
                        f2 in -50.0..50.0f64, d2 in -5.0..5.0f64, e2 in -20.0..20.0f64,
                        a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let g = IpGains::new(0.1, 0.5).unwrap();
            let lhs = ip_control(a * f1 + b * f2, &g, a * d1 + b * d2, a * e1 + b * e2).unwrap();
            let rhs = a * ip_control(f1, &g, d1, e1).unwrap() + b * ip_control(f2, &g, d2, e2).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }

        #[test]
        fn integral_ignores_offset(c in -100.0..100.0f64, slope in -5.0..5.0f64, amp in 0.0..3.0f64) {
            let s = window(1e-2, 50, |t| slope * t + amp * (7.0 * t).sin(), |t| (3.0 * t).cos());
            let shifted: Vec<Sample> = s.iter().map(|x| Sample { y: x.y + c, ..*x }).collect();
            let f1 = estimate_f_integral(&s, 0.5, 0.3).unwrap();
            let f2 = estimate_f_integral(&shifted, 0.5, 0.3).unwrap();
            prop_assert!((f1 - f2).abs() <= 1e-9 * (1.0 + c.abs()));
        }

        #[test]
        fn pi_integral_bounded_under_saturation(e in 1.0..50.0f64, steps in 100usize..2000) {
            let g = PiGains { kp: 2.0, ki: 0.5, u_min: 0.0, u_max: 70.0, anti_windup: true };
            let mut st = PiState::default();
            for _ in 0..steps {
                pi_control(&mut st, &g, e, 0.1).unwrap();
            }
            // bound: the last admitted step started with raw <= u_max
            let bound = (70.0 - g.kp * e).max(0.0) / g.ki + e * 0.1;
            prop_assert!(st.integral <= bound + 1e-9);
        }
    }
}
