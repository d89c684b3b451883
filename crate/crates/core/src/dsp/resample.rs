//! Rational polyphase resampling with a Kaiser-windowed sinc.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Reduced `(up, down)` factors for `from → to`, if the ratio is rational
/// with a denominator of at most 10 000.
pub fn rational_factors(from: f64, to: f64) -> Option<(usize, usize)> {
    const MAX_DEN: u64 = 10_000;
    let ratio = to / from;
    for down in 1..=MAX_DEN {
        let up = (ratio * down as f64).round();
        if up >= 1.0 && ((up / down as f64) - ratio).abs() <= 1e-9 * ratio {
            let (up, down) = (up as u64, down);
            let g = gcd(up, down);
            return Some(((up / g) as usize, (down / g) as usize));
        }
    }
    None
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Anti-aliasing low-pass for an `up/down` change, split into `up` phases
/// each normalized to unit DC gain.
fn polyphase_filter(up: usize, down: usize) -> (Vec<Vec<f64>>, usize) {
    const BETA: f64 = 8.0;
    let half = 16 * up.max(down);
    let len = 2 * half + 1;
    let cutoff = 0.5 / up.max(down) as f64;
    let taps: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 - half as f64;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let r = t / half as f64;
            let w = bessel_i0(BETA * (1.0 - r * r).max(0.0).sqrt()) / bessel_i0(BETA);
            sinc * w
        })
        .collect();
    let mut phases = vec![Vec::new(); up];
    for (i, &h) in taps.iter().enumerate() {
        phases[i % up].push(h);
    }
    for phase in &mut phases {
        let s: f64 = phase.iter().sum();
        if s.abs() > 0.0 {
            phase.iter_mut().for_each(|h| *h /= s);
        }
    }
    (phases, half)
}

/// Resamples one channel from `from` Hz to `to` Hz.
///
/// Output length is `round(n · to / from)`. Edges are extended by odd
/// reflection so constant and slowly varying signals are preserved there.
pub fn resample_channel(x: &[f64], from: f64, to: f64) -> Result<Vec<f64>> {
    if !(to > 0.0) || !(from > 0.0) {
        return Err(Error::Param(format!(
            "sample rates must be positive, got {from} → {to} Hz"
        )));
    }
    if to == from {
        return Ok(x.to_vec());
    }
    let (up, down) = rational_factors(from, to).ok_or_else(|| {
        Error::Param(format!("no rational resampling ratio for {from} → {to} Hz"))
    })?;
    let n = x.len();
    if n < 2 {
        return Err(Error::Length(format!("cannot resample {n} samples")));
    }
    let out_len = ((n as f64) * to / from).round() as usize;
    let (phases, half) = polyphase_filter(up, down);

    // input index range touched by the filter, with odd-reflection extension
    let sample = |i: isize| -> f64 {
        let last = (n - 1) as isize;
        if i < 0 {
            let m = (-i).min(last);
            2.0 * x[0] - x[m as usize]
        } else if i > last {
            let m = (last - (i - last)).max(0);
            2.0 * x[n - 1] - x[m as usize]
        } else {
            x[i as usize]
        }
    };

    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len {
        // position on the upsampled grid, centred on the filter
        let pos = (m * down) as isize;
        let start = pos - half as isize;
        // first upsampled index ≥ start that lands on an input sample
        let first = start.rem_euclid(up as isize);
        let offset = if first == 0 { 0 } else { up as isize - first };
        let tap0 = offset as usize;
        let phase = &phases[tap0 % up];
        let mut acc = 0.0;
        let base = (start + offset) / up as isize;
        for (k, &h) in phase.iter().enumerate() {
            acc += h * sample(base + k as isize);
        }
        out.push(acc);
    }
    Ok(out)
}
