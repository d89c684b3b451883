use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::recording::Recording;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    /// `C × L` samples.
    pub samples: Vec<Vec<f64>>,
    pub label: usize,
    pub trial_id: u64,
    pub subject_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// `C × W` samples.
    pub samples: Vec<Vec<f64>>,
    pub label: usize,
    pub trial_id: u64,
    pub subject_id: u64,
    pub segment_index: usize,
}

impl Segment {
    pub fn n_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Subtracts the per-sample mean of the included channels from each included
/// channel. Channels named in `exclude` are left untouched.
pub fn common_average_reference(rec: &Recording, exclude: &[String]) -> Result<Recording> {
    let included: Vec<usize> = rec
        .channel_labels
        .iter()
        .enumerate()
        .filter(|(_, l)| !exclude.contains(l))
        .map(|(i, _)| i)
        .collect();
    if included.len() < 2 {
        return Err(Error::Param(format!(
            "common average reference needs at least 2 included channels, {} remain after excluding {exclude:?}",
            included.len()
        )));
    }
    let n = rec.n_samples();
    let mut mean = vec![0.0; n];
    for &c in &included {
        for (m, v) in mean.iter_mut().zip(&rec.samples[c]) {
            *m += v;
        }
    }
    let k = included.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let mut out = rec.clone();
    for &c in &included {
        for (v, m) in out.samples[c].iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpochConfig {
    /// Markers that start an epoch; every one must appear in `labels`.
    pub accepted_markers: Vec<String>,
    pub labels: BTreeMap<String, usize>,
    /// Window start relative to the event onset, in seconds.
    pub t_start: f64,
    pub t_end: f64,
}

impl Default for EpochConfig {
    fn default() -> Self {
        Self {
            accepted_markers: vec!["S1".into(), "S2".into()],
            labels: BTreeMap::from([("S1".into(), 0), ("S2".into(), 1)]),
            t_start: 9.0,
            t_end: 15.0,
        }
    }
}

impl EpochConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accepted_markers.is_empty() {
            return Err(Error::Config("accepted marker set is empty".into()));
        }
        if let Some(m) = self.accepted_markers.iter().find(|m| !self.labels.contains_key(*m)) {
            return Err(Error::Config(format!("accepted marker `{m}` has no label mapping")));
        }
        if !(self.t_start >= 0.0 && self.t_end > self.t_start) {
            return Err(Error::Config(format!(
                "epoch window [{}, {}) s is empty or negative",
                self.t_start, self.t_end
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Epochs {
    pub epochs: Vec<Epoch>,
    /// Accepted events whose window ran past the end of the recording.
    pub skipped: usize,
}

/// Slices `[onset + t_start·fs, onset + t_end·fs)` for every accepted event.
pub fn extract_epochs(rec: &Recording, cfg: &EpochConfig) -> Result<Epochs> {
    cfg.validate()?;
    let fs = rec.sample_rate;
    let start_off = (cfg.t_start * fs).round() as usize;
    let len = ((cfg.t_end - cfg.t_start) * fs).round() as usize;
    let mut out = Epochs::default();
    for ev in &rec.events {
        if !cfg.accepted_markers.contains(&ev.marker) {
            continue;
        }
        let label = cfg.labels[&ev.marker];
        let start = ev.onset_sample + start_off;
        if start + len > rec.n_samples() {
            warn!(
                "skipping `{}` at sample {}: window ends past sample {}",
                ev.marker,
                ev.onset_sample,
                rec.n_samples()
            );
            out.skipped += 1;
            continue;
        }
        out.epochs.push(Epoch {
            samples: rec.samples.iter().map(|r| r[start..start + len].to_vec()).collect(),
            label,
            trial_id: ev.trial_id,
            subject_id: rec.subject_id,
        });
    }
    Ok(out)
}

/// Per-channel standardization with the population standard deviation.
/// Channels with a standard deviation below `1e-8` become all zeros.
pub fn zscore(epoch: &Epoch) -> Epoch {
    let samples = epoch
        .samples
        .iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let std = (row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if std < 1e-8 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|v| (v - mean) / std).collect()
            }
        })
        .collect();
    Epoch {
        samples,
        ..epoch.clone()
    }
}

/// Splits an epoch into contiguous, non-overlapping windows of `window`
/// samples.
pub fn segment_windows(epoch: &Epoch, window: usize) -> Result<Vec<Segment>> {
    let len = epoch.samples.first().map_or(0, Vec::len);
    if window == 0 || len == 0 || !len.is_multiple_of(window) {
        return Err(Error::Shape(format!(
            "epoch of {len} samples is not divisible into windows of {window}"
        )));
    }
    Ok((0..len / window)
        .map(|i| Segment {
            samples: epoch
                .samples
                .iter()
                .map(|r| r[i * window..(i + 1) * window].to_vec())
                .collect(),
            label: epoch.label,
            trial_id: epoch.trial_id,
            subject_id: epoch.subject_id,
            segment_index: i,
        })
        .collect())
}
