//! In-memory recordings and the TGR v1 on-disk format.
//!
//! A TGR v1 recording is a pair of files: `<stem>.json`, a header, and
//! `<stem>.bin`, little-endian `f64` samples stored channel-major (all of
//! channel 0, then all of channel 1, ...). The header's `n_samples` must match
//! the size of the binary file exactly.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TGR_VERSION: &str = "TGR v1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub onset_sample: usize,
    pub marker: String,
    pub trial_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub channel_labels: Vec<String>,
    pub sample_rate: f64,
    /// One row per channel, all of equal length.
    pub samples: Vec<Vec<f64>>,
    pub events: Vec<Event>,
    pub subject_id: u64,
}

impl Recording {
    pub fn new(
        channel_labels: Vec<String>,
        sample_rate: f64,
        samples: Vec<Vec<f64>>,
        events: Vec<Event>,
        subject_id: u64,
    ) -> Result<Self> {
        let rec = Self {
            channel_labels,
            sample_rate,
            samples,
            events,
            subject_id,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn n_channels(&self) -> usize {
        self.samples.len()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) {
            return Err(Error::Param(format!("sample rate {} must be positive", self.sample_rate)));
        }
        if self.channel_labels.len() != self.samples.len() {
            return Err(Error::Shape(format!(
                "{} channel labels for {} channels",
                self.channel_labels.len(),
                self.samples.len()
            )));
        }
        let n = self.n_samples();
        if let Some((c, row)) = self.samples.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::Shape(format!(
                "channel {c} has {} samples, expected {n}",
                row.len()
            )));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.channel_labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Param(format!("duplicate channel label `{dup}`")));
        }
        if let Some(ev) = self.events.iter().find(|e| e.onset_sample >= n) {
            return Err(Error::Index(format!(
                "event `{}` at sample {} lies outside the {n}-sample recording",
                ev.marker, ev.onset_sample
            )));
        }
        Ok(())
    }

    /// Applies `f` to every channel, keeping metadata.
    pub fn map_channels(&self, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Self> {
        let samples = self.samples.iter().map(|row| f(row)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            samples,
            ..self.clone()
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    sample_rate: f64,
    channel_labels: Vec<String>,
    n_samples: usize,
    subject_id: u64,
    data_file: String,
    annotations: Vec<Event>,
}

fn header_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the header path.
pub fn write_tgr(dir: &Path, stem: &str, rec: &Recording) -> Result<PathBuf> {
    rec.validate()?;
    let data_file = format!("{stem}.bin");
    let header = Header {
        version: TGR_VERSION.to_string(),
        sample_rate: rec.sample_rate,
        channel_labels: rec.channel_labels.clone(),
        n_samples: rec.n_samples(),
        subject_id: rec.subject_id,
        data_file: data_file.clone(),
        annotations: rec.events.clone(),
    };
    let hpath = header_path(dir, stem);
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&hpath, json).map_err(|e| Error::io(&hpath, e))?;
    let mut bytes = Vec::with_capacity(rec.n_channels() * rec.n_samples() * 8);
    for row in &rec.samples {
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bpath = dir.join(&data_file);
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))?;
    Ok(hpath)
}

/// Reads a recording from its header path.
pub fn read_tgr(header: &Path) -> Result<Recording> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let h: Header = serde_json::from_str(&text)
        .map_err(|e| Error::format(header, format!("invalid header: {e}")))?;
    if h.version != TGR_VERSION {
        return Err(Error::format(header, format!("unsupported version `{}`", h.version)));
    }
    let bpath = header.parent().unwrap_or(Path::new(".")).join(&h.data_file);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let c = h.channel_labels.len();
    let expected = c * h.n_samples * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            &bpath,
            format!(
                "header declares {c} channels × {} samples ({expected} bytes) but file holds {} bytes",
                h.n_samples,
                bytes.len()
            ),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let samples = if h.n_samples == 0 {
        vec![Vec::new(); c]
    } else {
        values.chunks_exact(h.n_samples).map(<[f64]>::to_vec).collect()
    };
    Recording::new(h.channel_labels, h.sample_rate, samples, h.annotations, h.subject_id)
        .map_err(|e| Error::format(header, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Recording {
        Recording::new(
            vec!["Cz".into(), "Pz".into()],
            256.0,
            vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 1e-300]],
            vec![Event { onset_sample: 1, marker: "S1".into(), trial_id: 7 }],
            3,
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tgr(dir.path(), "sub-03", &tiny()).unwrap();
        assert_eq!(read_tgr(&path).unwrap(), tiny());
    }

    #[test]
    fn mismatched_sample_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_tgr(dir.path(), "r", &tiny()).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("\"n_samples\": 3", "\"n_samples\": 4");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_tgr(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn invariants_checked() {
        let mut r = tiny();
        r.channel_labels[1] = "Cz".into();
        assert!(r.validate().is_err());
        let mut r = tiny();
        r.events[0].onset_sample = 3;
        assert!(matches!(r.validate(), Err(Error::Index(_))));
        let mut r = tiny();
        r.samples[1].pop();
        assert!(matches!(r.validate(), Err(Error::Shape(_))));
    }
}
