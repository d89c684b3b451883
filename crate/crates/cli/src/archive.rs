//! Segment archive: `segments.json` plus one little-endian `f64` blob holding
//! every segment's `C × W` samples, segment-major.

use std::fs;
use std::path::{Path, PathBuf};

use eeg_tgat::dsp::Segment;
use eeg_tgat::Error;
use serde::{Deserialize, Serialize};

pub const ARCHIVE_FORMAT: &str = "TGAT-SEG v1";
pub const MANIFEST: &str = "segments.json";
const BLOB: &str = "segments.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    /// Offset into the blob, in values.
    pub offset: usize,
    pub label: usize,
    pub trial_id: u64,
    pub subject_id: u64,
    pub segment_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub format: String,
    pub blob: String,
    pub sample_rate: f64,
    pub channel_labels: Vec<String>,
    pub samples_per_segment: usize,
    /// Indexed by label.
    pub class_names: Vec<String>,
    pub segments: Vec<SegmentEntry>,
}

pub struct Archive {
    pub manifest: ArchiveManifest,
    pub segments: Vec<Segment>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), reason: reason.into() }
}

pub fn write_archive(
    dir: &Path,
    segments: &[Segment],
    channel_labels: &[String],
    sample_rate: f64,
    class_names: &[String],
) -> Result<PathBuf, Error> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let w = segments.first().map_or(0, |s| s.samples.first().map_or(0, Vec::len));
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(segments.len());
    for s in segments {
        entries.push(SegmentEntry {
            offset: blob.len() / 8,
            label: s.label,
            trial_id: s.trial_id,
            subject_id: s.subject_id,
            segment_index: s.segment_index,
        });
        for row in &s.samples {
            for v in row {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = ArchiveManifest {
        format: ARCHIVE_FORMAT.into(),
        blob: BLOB.into(),
        sample_rate,
        channel_labels: channel_labels.to_vec(),
        samples_per_segment: w,
        class_names: class_names.to_vec(),
        segments: entries,
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, blob).map_err(io(&blob_path))?;
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, json).map_err(io(&path))?;
    Ok(path)
}

/// Accepts the archive directory or its `segments.json`.
pub fn read_archive(path: &Path) -> Result<Archive, Error> {
    let manifest_path = if path.is_dir() { path.join(MANIFEST) } else { path.to_path_buf() };
    let text = fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
    let manifest: ArchiveManifest =
        serde_json::from_str(&text).map_err(|e| malformed(&manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.format != ARCHIVE_FORMAT {
        return Err(malformed(&manifest_path, format!("unsupported format {:?}", manifest.format)));
    }
    if manifest.segments.is_empty() {
        return Err(Error::Config(format!("segment archive {} is empty", manifest_path.display())));
    }
    let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(io(&blob_path))?;
    let c = manifest.channel_labels.len();
    let w = manifest.samples_per_segment;
    let per = c * w;
    if bytes.len() != 8 * per * manifest.segments.len() {
        return Err(malformed(
            &blob_path,
            format!("{} bytes for {} segments of {c}×{w} values", bytes.len(), manifest.segments.len()),
        ));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    let mut segments = Vec::with_capacity(manifest.segments.len());
    for (i, e) in manifest.segments.iter().enumerate() {
        if e.offset != i * per {
            return Err(malformed(&manifest_path, format!("segment {i} has offset {} (expected {})", e.offset, i * per)));
        }
        if e.label >= manifest.class_names.len() {
            return Err(malformed(&manifest_path, format!("segment {i} has unknown label {}", e.label)));
        }
        segments.push(Segment {
            samples: values[e.offset..e.offset + per].chunks_exact(w).map(<[f64]>::to_vec).collect(),
            label: e.label,
            trial_id: e.trial_id,
            subject_id: e.subject_id,
            segment_index: e.segment_index,
        });
    }
    Ok(Archive { manifest, segments })
}
