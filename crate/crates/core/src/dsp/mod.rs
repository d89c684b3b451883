//! Preprocessing from raw recordings to normalized one-second segments.
//!
//! The chain is fixed: notch → band-pass → common average reference →
//! resample → epoch → z-score → window.

pub mod epoch;
pub mod filter;
pub mod recording;
pub mod resample;

use serde::{Deserialize, Serialize};

pub use epoch::{
    common_average_reference, extract_epochs, segment_windows, zscore, Epoch, EpochConfig, Epochs,
    Segment,
};
pub use filter::{design_bandpass, design_notch, filtfilt_channel, Biquad, BiquadCascade};
pub use recording::{read_tgr, write_tgr, Event, Recording, TGR_VERSION};
pub use resample::{rational_factors, resample_channel};

use crate::error::{Error, Result};

/// Zero-phase filtering of every channel.
pub fn filtfilt(filter: &BiquadCascade, rec: &Recording) -> Result<Recording> {
    rec.map_channels(|row| filtfilt_channel(filter, row))
}

/// Resamples every channel and rescales event onsets to the new rate.
pub fn resample(rec: &Recording, target: f64) -> Result<Recording> {
    if !(target > 0.0) {
        return Err(Error::Param(format!("target sample rate must be positive, got {target}")));
    }
    if target == rec.sample_rate {
        return Ok(rec.clone());
    }
    let mut out = rec.map_channels(|row| resample_channel(row, rec.sample_rate, target))?;
    let n = out.n_samples();
    let ratio = target / rec.sample_rate;
    for ev in &mut out.events {
        ev.onset_sample = ((ev.onset_sample as f64 * ratio).round() as usize).min(n.saturating_sub(1));
    }
    out.sample_rate = target;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub notch_hz: f64,
    pub notch_q: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    /// Low-pass prototype order of the Butterworth band-pass.
    pub band_order: usize,
    /// Channels left out of the common average.
    pub car_exclude: Vec<String>,
    /// Whether excluded (non-EEG) channels are dropped before epoching.
    pub drop_excluded: bool,
    pub target_rate: f64,
    pub epoch: EpochConfig,
    pub window_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            notch_hz: 50.0,
            notch_q: 30.0,
            band_low_hz: 0.1,
            band_high_hz: 40.0,
            band_order: 4,
            car_exclude: vec!["VEOG".into()],
            drop_excluded: true,
            target_rate: 256.0,
            epoch: EpochConfig::default(),
            window_s: 1.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        self.epoch.validate()?;
        if !(self.target_rate > 0.0) || !(self.window_s > 0.0) {
            return Err(Error::Config("target rate and window length must be positive".into()));
        }
        let win = self.window_s * self.target_rate;
        if (win - win.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "window of {} s is not a whole number of samples at {} Hz",
                self.window_s, self.target_rate
            )));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window_s * self.target_rate).round() as usize
    }
}

#[derive(Clone, Debug, Default)]
pub struct Preprocessed {
    pub segments: Vec<Segment>,
    pub channel_labels: Vec<String>,
    pub epochs: usize,
    pub skipped: usize,
}

/// Runs the full chain on one recording.
pub fn preprocess_recording(rec: &Recording, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.validate()?;
    rec.validate()?;
    let fs = rec.sample_rate;
    let notch = design_notch(cfg.notch_hz, fs, cfg.notch_q)?;
    let band = design_bandpass(cfg.band_low_hz, cfg.band_high_hz, fs, cfg.band_order)?;
    let x = filtfilt(&notch, rec)?;
    let x = filtfilt(&band, &x)?;
    let mut x = common_average_reference(&x, &cfg.car_exclude)?;
    if cfg.drop_excluded {
        let keep: Vec<usize> = (0..x.n_channels())
            .filter(|&c| !cfg.car_exclude.contains(&x.channel_labels[c]))
            .collect();
        x.samples = keep.iter().map(|&c| std::mem::take(&mut x.samples[c])).collect();
        x.channel_labels = keep.iter().map(|&c| x.channel_labels[c].clone()).collect();
    }
    let x = resample(&x, cfg.target_rate)?;
    let Epochs { epochs, skipped } = extract_epochs(&x, &cfg.epoch)?;
    let window = cfg.window_samples();
    let mut segments = Vec::with_capacity(epochs.len() * 6);
    for e in &epochs {
        segments.extend(segment_windows(&zscore(e), window)?);
    }
    Ok(Preprocessed {
        segments,
        channel_labels: x.channel_labels,
        epochs: epochs.len(),
        skipped,
    })
}
