//! IIR design as cascaded second-order sections and zero-phase application.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One second-order section, normalized so `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    /// Complex gain at `freq` Hz for sample rate `fs`.
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        let z2 = z1 * z1;
        (self.b0 + self.b1 * z1 + self.b2 * z2) / (1.0 + self.a1 * z1 + self.a2 * z2)
    }

    /// Pole magnitudes of `z² + a1·z + a2`.
    pub fn pole_radii(&self) -> [f64; 2] {
        let disc = Complex64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        let p1 = (-self.a1 + disc) / 2.0;
        let p2 = (-self.a1 - disc) / 2.0;
        [p1.norm(), p2.norm()]
    }

    pub fn is_stable(&self) -> bool {
        self.pole_radii().iter().all(|&r| r < 1.0)
    }

    fn scaled(self, g: f64) -> Self {
        Self {
            b0: self.b0 * g,
            b1: self.b1 * g,
            b2: self.b2 * g,
            ..self
        }
    }

    /// Steady-state transposed direct-form II state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let dc = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        [dc - self.b0, self.b2 - self.a2 * dc]
    }

    fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
}

impl BiquadCascade {
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        self.sections
            .iter()
            .map(|s| s.response(freq, fs))
            .fold(Complex64::new(1.0, 0.0), |acc, h| acc * h)
    }

    pub fn gain_db(&self, freq: f64, fs: f64) -> f64 {
        20.0 * self.response(freq, fs).norm().log10()
    }

    pub fn is_stable(&self) -> bool {
        self.sections.iter().all(Biquad::is_stable)
    }

    /// Reflection padding used by [`filtfilt`] on each edge.
    pub fn pad_len(&self) -> usize {
        3 * self.sections.len() * 10
    }

    /// Causal single pass with the given per-section initial states.
    fn run(&self, x: &mut [f64], states: &mut [[f64; 2]]) {
        for (s, st) in self.sections.iter().zip(states.iter_mut()) {
            let [mut z1, mut z2] = *st;
            for v in x.iter_mut() {
                let xin = *v;
                let y = s.b0 * xin + z1;
                z1 = s.b1 * xin - s.a1 * y + z2;
                z2 = s.b2 * xin - s.a2 * y;
                *v = y;
            }
            *st = [z1, z2];
        }
    }

    /// Per-section steady states for a unit step, each section scaled by the
    /// DC gain of the sections before it.
    fn step_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let [z1, z2] = s.step_state();
                let st = [z1 * scale, z2 * scale];
                scale *= s.dc_gain();
                st
            })
            .collect()
    }
}

/// Notch at `f0` with quality factor `q` (bilinear-transform biquad).
pub fn design_notch(f0: f64, fs: f64, q: f64) -> Result<BiquadCascade> {
    if !(f0 > 0.0 && f0 < fs / 2.0) {
        return Err(Error::Design(format!(
            "notch frequency {f0} Hz must lie strictly between 0 and Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    if q <= 0.0 {
        return Err(Error::Design(format!("notch quality factor must be positive, got {q}")));
    }
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let c = w0.cos();
    Ok(BiquadCascade {
        sections: vec![Biquad {
            b0: 1.0 / a0,
            b1: -2.0 * c / a0,
            b2: 1.0 / a0,
            a1: -2.0 * c / a0,
            a2: (1.0 - alpha) / a0,
        }],
    })
}

/// Butterworth band-pass built from an `order`-pole low-pass prototype,
/// giving `order` biquads (`2·order` poles).
pub fn design_bandpass(low: f64, high: f64, fs: f64, order: usize) -> Result<BiquadCascade> {
    if !(low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::Design(format!(
            "band [{low}, {high}] Hz must satisfy 0 < low < high < Nyquist ({} Hz)",
            fs / 2.0
        )));
    }
    if order == 0 {
        return Err(Error::Design("band-pass order must be at least 1".into()));
    }
    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (wl, wh) = (warp(low), warp(high));
    let bw = wh - wl;
    let w0sq = wl * wh;
    let k2 = 2.0 * fs;

    let mut zpoles = Vec::with_capacity(2 * order);
    for k in 1..=order {
        let theta = PI * (2 * k + order - 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0sq).sqrt();
        for s in [(pb + disc) / 2.0, (pb - disc) / 2.0] {
            zpoles.push((k2 + s) / (k2 - s));
        }
    }

    // pair each pole with its conjugate (or the nearest remaining real pole)
    let mut sections = Vec::with_capacity(order);
    let mut remaining = zpoles;
    let center = fs / PI * (w0sq.sqrt() / k2).atan();
    while let Some(p) = remaining.pop() {
        let mate = remaining
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                (**a - p.conj()).norm().partial_cmp(&(**b - p.conj()).norm()).unwrap()
            })
            .map(|(i, _)| i)
            .ok_or_else(|| Error::Design("unpaired pole in band-pass design".into()))?;
        let q = remaining.swap_remove(mate);
        let sum = p + q;
        let prod = p * q;
        let raw = Biquad {
            b0: 1.0,
            b1: 0.0,
            b2: -1.0,
            a1: -sum.re,
            a2: prod.re,
        };
        let g = raw.response(center, fs).norm();
        sections.push(raw.scaled(1.0 / g));
    }
    sections.sort_by(|a, b| a.a2.partial_cmp(&b.a2).unwrap());
    let cascade = BiquadCascade { sections };
    if !cascade.is_stable() {
        return Err(Error::Design(format!(
            "band-pass [{low}, {high}] Hz at {fs} Hz produced an unstable section"
        )));
    }
    Ok(cascade)
}

/// Forward-backward (zero-phase) filtering of one channel.
///
/// The signal is extended by odd reflection of [`BiquadCascade::pad_len`]
/// samples at each end and both passes start from steady-state initial
/// conditions scaled by the first sample.
pub fn filtfilt_channel(filter: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>> {
    let pad = filter.pad_len();
    let n = x.len();
    if n <= pad {
        return Err(Error::Length(format!(
            "{n} samples cannot be zero-phase filtered with {pad} samples of edge padding"
        )));
    }
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = filter.step_states();
    let scaled = |v: f64| zi.iter().map(|[a, b]| [a * v, b * v]).collect::<Vec<_>>();

    let mut st = scaled(ext[0]);
    filter.run(&mut ext, &mut st);
    ext.reverse();
    let mut st = scaled(ext[0]);
    filter.run(&mut ext, &mut st);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}
