//! Fixtures shared by the benches.

use mfcnet::{Datagram, Kind, Sample};

/// An iP window of `n + 1` samples on a noisy ramp.
pub fn window(n: usize, ts: f64) -> Vec<Sample> {
    (0..=n)
        .map(|k| {
            let t = k as f64 * ts;
            Sample {
                t,
                y: 2.0 + 0.5 * t + 0.01 * (k as f64 * 1.7).sin(),
                u: 10.0 + (k % 7) as f64,
                y_star_dot: 0.1,
                e: 0.05 * (k as f64).cos(),
            }
        })
        .collect()
}

pub fn control_datagram(seq: u32) -> Datagram {
    Datagram::new(Kind::Control, seq, seq as f64 * 0.01, vec![1.5, -0.25, 0.5, 0.01])
}
