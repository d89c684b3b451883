//! Synthetic multichannel recordings with a controllable class signal.
//!
//! Background: per-channel 1/f^γ noise made by shaping white noise in the
//! frequency domain, plus a 50 Hz line component and a slow drift. Each trial
//! adds a Hann-windowed sinusoid to the signal channels during the epoch
//! window. Class `c` of `K` oscillates at `low + (c + ½)/K · (high − low)`, so
//! a single one-second segment carries its class. In `uniform` timing every
//! segment of the window holds a burst; in `localized` timing only the
//! class-specific segment does.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{write_tgr, Event, Recording};
use crate::error::{Error, Result};
use crate::numerics::stream;

const CHANNEL_NAMES: [&str; 19] = [
    "F3", "Fz", "F4", "C3", "Cz", "C4", "P3", "Pz", "P4", "Fp1", "Fp2", "F7", "F8", "T7", "T8", "P7", "P8", "O1", "O2",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Timing {
    Uniform,
    /// Burst confined to one segment of the window; `segments[c]` is the
    /// 0-based segment index for class `c`.
    Localized { segments: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub trials_per_class: usize,
    pub channels: usize,
    pub sample_rate: f64,
    /// One marker per class, in class order.
    pub markers: Vec<String>,
    /// Silence before the first onset, seconds.
    pub lead_in_s: f64,
    /// Onset-to-onset distance, seconds.
    pub trial_spacing_s: f64,
    /// Silence after the last trial window, seconds.
    pub tail_s: f64,
    /// Burst window relative to onset, seconds.
    pub window_start_s: f64,
    pub window_end_s: f64,
    pub segment_s: f64,
    pub noise_exponent: f64,
    pub noise_std: f64,
    pub line_noise_amplitude: f64,
    pub line_noise_hz: f64,
    pub drift_amplitude: f64,
    pub drift_hz: f64,
    pub signal_band: [f64; 2],
    /// Burst RMS over its segment, in units of `noise_std`.
    pub signal_amplitude: f64,
    pub signal_channels: Vec<usize>,
    pub timing: Timing,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 1,
            trials_per_class: 40,
            channels: 8,
            sample_rate: 256.0,
            markers: vec!["S1".into(), "S2".into()],
            lead_in_s: 2.0,
            trial_spacing_s: 17.0,
            tail_s: 3.0,
            window_start_s: 9.0,
            window_end_s: 15.0,
            segment_s: 1.0,
            noise_exponent: 1.0,
            noise_std: 1.0,
            line_noise_amplitude: 0.5,
            line_noise_hz: 50.0,
            drift_amplitude: 2.0,
            drift_hz: 0.05,
            signal_band: [8.0, 13.0],
            signal_amplitude: 2.0,
            signal_channels: vec![2, 3, 4, 5],
            timing: Timing::Uniform,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Strong burst in every segment.
    pub fn separable() -> Self {
        Self::default()
    }

    /// Weaker burst confined to one class-specific segment.
    pub fn temporal() -> Self {
        Self { signal_amplitude: 1.0, timing: Timing::Localized { segments: vec![1, 4] }, ..Self::default() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "separable" => Some(Self::separable()),
            "temporal" => Some(Self::temporal()),
            _ => None,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.markers.len()
    }

    pub fn n_segments(&self) -> usize {
        ((self.window_end_s - self.window_start_s) / self.segment_s).round() as usize
    }

    pub fn class_frequency(&self, class: usize) -> f64 {
        let [lo, hi] = self.signal_band;
        lo + (class as f64 + 0.5) / self.n_classes() as f64 * (hi - lo)
    }

    fn samples(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_subjects == 0 || self.trials_per_class == 0 || self.channels == 0 {
            return fail("n_subjects, trials_per_class and channels must be positive".into());
        }
        if self.n_classes() < 2 {
            return fail("at least two class markers are required".into());
        }
        if !(self.sample_rate > 0.0) {
            return fail(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("line_noise_amplitude", self.line_noise_amplitude),
            ("drift_amplitude", self.drift_amplitude),
            ("signal_amplitude", self.signal_amplitude),
        ] {
            if !(v >= 0.0) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        let nyq = self.sample_rate / 2.0;
        let [lo, hi] = self.signal_band;
        if !(lo > 0.0 && hi > lo && hi < nyq) {
            return fail(format!("signal band [{lo}, {hi}] must lie inside (0, {nyq}) Hz"));
        }
        if !(self.drift_hz > 0.0 && self.drift_hz < 0.1) {
            return fail(format!("drift_hz must lie in (0, 0.1), got {}", self.drift_hz));
        }
        if !(self.line_noise_hz > 0.0 && self.line_noise_hz < nyq) {
            return fail(format!("line_noise_hz must lie in (0, {nyq})"));
        }
        if let Some(&c) = self.signal_channels.iter().find(|&&c| c >= self.channels) {
            return fail(format!("signal channel {c} outside 0..{}", self.channels));
        }
        if !(self.window_start_s >= 0.0 && self.window_end_s > self.window_start_s && self.segment_s > 0.0) {
            return fail("burst window must be non-empty and start at or after the onset".into());
        }
        let segs = (self.window_end_s - self.window_start_s) / self.segment_s;
        if (segs - segs.round()).abs() > 1e-9 {
            return fail("burst window is not a whole number of segments".into());
        }
        if let Timing::Localized { segments } = &self.timing {
            if segments.len() != self.n_classes() {
                return fail(format!("{} localized segments for {} classes", segments.len(), self.n_classes()));
            }
            if let Some(&s) = segments.iter().find(|&&s| s >= self.n_segments()) {
                return fail(format!("localized segment {s} outside 0..{}", self.n_segments()));
            }
        }
        if !(self.lead_in_s >= 0.0 && self.tail_s >= 0.0) {
            return fail("lead-in and tail must be non-negative".into());
        }
        if self.trial_spacing_s < self.window_end_s {
            return Err(Error::Layout(format!(
                "trial spacing {} s is shorter than the {} s trial window; trials would overlap",
                self.trial_spacing_s, self.window_end_s
            )));
        }
        Ok(())
    }

    pub fn channel_labels(&self) -> Vec<String> {
        (0..self.channels)
            .map(|c| CHANNEL_NAMES.get(c).map_or_else(|| format!("E{}", c + 1), |s| s.to_string()))
            .collect()
    }
}

/// Unit-variance 1/f^γ noise.
fn colored_noise<R: Rng + ?Sized>(n: usize, fs: f64, gamma: f64, rng: &mut R) -> Vec<f64> {
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut x, &mut spec).expect("sized by plan");
    let df = fs / n as f64;
    spec[0] = 0.0.into();
    for (k, c) in spec.iter_mut().enumerate().skip(1) {
        *c *= (k as f64 * df).powf(-gamma / 2.0);
    }
    if n.is_multiple_of(2) {
        let last = spec.len() - 1;
        spec[last].im = 0.0;
    }
    // Parseval on the one-sided spectrum: interior bins count twice
    let power: f64 = spec
        .iter()
        .enumerate()
        .map(|(k, c)| if k == 0 || (n.is_multiple_of(2) && k == n / 2) { 1.0 } else { 2.0 } * c.norm_sqr())
        .sum::<f64>()
        / (n as f64 * n as f64);
    inv.process(&mut spec, &mut x).expect("sized by plan");
    let scale = 1.0 / (n as f64 * power.sqrt());
    x.iter_mut().for_each(|v| *v *= scale);
    x
}

/// One recording of `2 · trials_per_class` (generally `K ·`) trials in
/// shuffled class order.
pub fn generate_recording<R: Rng + ?Sized>(cfg: &SynthConfig, subject: u64, rng: &mut R) -> Result<Recording> {
    cfg.validate()?;
    let fs = cfg.sample_rate;
    let k = cfg.n_classes();
    let mut labels: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, cfg.trials_per_class)).collect();
    labels.shuffle(rng);
    let spacing = cfg.samples(cfg.trial_spacing_s);
    let lead = cfg.samples(cfg.lead_in_s);
    let n = lead + (labels.len() - 1) * spacing + cfg.samples(cfg.window_end_s) + cfg.samples(cfg.tail_s);

    let mut samples = Vec::with_capacity(cfg.channels);
    for _ in 0..cfg.channels {
        let mut x = colored_noise(n, fs, cfg.noise_exponent, rng);
        let line_phase = rng.gen_range(0.0..2.0 * PI);
        let drift_phase = rng.gen_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / fs;
            *v = cfg.noise_std * *v
                + cfg.line_noise_amplitude * (2.0 * PI * cfg.line_noise_hz * t + line_phase).sin()
                + cfg.drift_amplitude * (2.0 * PI * cfg.drift_hz * t + drift_phase).sin();
        }
        samples.push(x);
    }

    let seg = cfg.samples(cfg.segment_s);
    let start = cfg.samples(cfg.window_start_s);
    // Hann-windowed sine has mean square 3/16 of its squared peak
    let amp = cfg.signal_amplitude * cfg.noise_std * (16.0f64 / 3.0).sqrt();
    let mut events = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let onset = lead + i * spacing;
        events.push(Event { onset_sample: onset, marker: cfg.markers[label].clone(), trial_id: (subject << 32) | i as u64 });
        let segments: Vec<usize> = match &cfg.timing {
            Timing::Uniform => (0..cfg.n_segments()).collect(),
            Timing::Localized { segments } => vec![segments[label]],
        };
        let f = cfg.class_frequency(label);
        for s in segments {
            let begin = onset + start + s * seg;
            for &c in &cfg.signal_channels {
                let phase = rng.gen_range(0.0..2.0 * PI);
                for j in 0..seg {
                    let w = 0.5 - 0.5 * (2.0 * PI * j as f64 / seg as f64).cos();
                    samples[c][begin + j] += amp * w * (2.0 * PI * f * j as f64 / fs + phase).sin();
                }
            }
        }
    }
    Recording::new(cfg.channel_labels(), fs, samples, events, subject)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Header files, relative to the dataset directory.
    pub files: Vec<String>,
    pub labels: std::collections::BTreeMap<String, usize>,
    pub seed: u64,
    pub config: SynthConfig,
}

/// Writes one TGR v1 pair per subject plus `manifest.json` into `dir`.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let recordings = (0..cfg.n_subjects as u64)
        .into_par_iter()
        .map(|s| generate_recording(cfg, s, &mut stream(cfg.seed, &[s])))
        .collect::<Result<Vec<_>>>()?;
    let mut files = Vec::new();
    for (s, rec) in recordings.iter().enumerate() {
        let stem = format!("sub{:02}", s + 1);
        write_tgr(dir, &stem, rec)?;
        files.push(format!("{stem}.json"));
    }
    let manifest = Manifest {
        files,
        labels: cfg.markers.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect(),
        seed: cfg.seed,
        config: cfg.clone(),
    };
    let path: PathBuf = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
