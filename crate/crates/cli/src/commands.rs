use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use eeg_tgat::diagnostics::{model_suite, op_suite, random_batch, CheckEntry, TOLERANCE};
use eeg_tgat::dsp::{preprocess_recording, read_tgr, Preprocessed};
use eeg_tgat::graph::{build_graph, EEGGraph};
use eeg_tgat::model::{load_checkpoint, save_checkpoint, Ablation, CheckpointMeta, ModelConfig};
use eeg_tgat::numerics::OpKind;
use eeg_tgat::synth::{generate_dataset, Manifest};
use eeg_tgat::train::{compute_metrics, confusion_matrix, cross_validate, evaluate, write_reports, Fold};
use eeg_tgat::Error;
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::archive::{read_archive, write_archive, Archive};
use crate::config::RunConfig;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

/// Creates `<base>/<timestamp>-<command>-<config hash>` and echoes the
/// resolved config into it.
pub fn create_run_dir(cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%dT%H%M%S");
    let stem = format!("{stamp}-{command}-{}", cfg.hash());
    let base = &cfg.paths.output;
    fs::create_dir_all(base).map_err(|source| Error::Io { path: base.clone(), source })?;
    let mut dir = base.join(&stem);
    let mut n = 1;
    while dir.exists() {
        dir = base.join(format!("{stem}-{n}"));
        n += 1;
    }
    fs::create_dir(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    write_file(&dir.join("config.json"), cfg.to_pretty_json())?;
    println!("run directory: {}", dir.display());
    Ok(dir)
}

fn required_input(cfg: &RunConfig, what: &str) -> Result<PathBuf> {
    cfg.paths
        .input
        .clone()
        .ok_or_else(|| Error::Config(format!("no {what} given (use --input or paths.input)")).into())
}

/// Marker names per label; markers sharing a label are joined with `/`.
fn class_names(cfg: &RunConfig) -> Vec<String> {
    let labels = &cfg.preprocess.epoch.labels;
    let k = labels.values().max().map_or(0, |m| m + 1);
    (0..k)
        .map(|c| {
            let names: Vec<&str> = labels.iter().filter(|(_, &l)| l == c).map(|(m, _)| m.as_str()).collect();
            if names.is_empty() {
                format!("class{c}")
            } else {
                names.join("/")
            }
        })
        .collect()
}

pub fn synth(cfg: &RunConfig) -> Result<ExitCode> {
    cfg.synth.validate()?;
    let dir = create_run_dir(cfg, "synth")?;
    let manifest = generate_dataset(&cfg.synth, &dir)?;
    println!(
        "subjects: {}, trials: {}, files: {}",
        cfg.synth.n_subjects,
        cfg.synth.n_subjects * cfg.synth.trials_per_class * cfg.synth.n_classes(),
        manifest.files.len() * 2 + 1
    );
    Ok(ExitCode::SUCCESS)
}

/// Recording headers in `dir`: the dataset manifest's list when present,
/// otherwise every `*.json` except known non-recording files.
fn recording_headers(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path)
            .map_err(|source| Error::Io { path: manifest_path.clone(), source })?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: manifest_path.clone(), reason: e.to_string() })?;
        return Ok(m.files.iter().map(|f| dir.join(f)).collect());
    }
    let entries = fs::read_dir(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let mut headers = Vec::new();
    for e in entries {
        let p = e.map_err(|source| Error::Io { path: dir.to_path_buf(), source })?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if p.extension().is_some_and(|x| x == "json") && !["config.json", "segments.json"].contains(&name) {
            headers.push(p);
        }
    }
    headers.sort();
    Ok(headers)
}

pub fn preprocess(cfg: &RunConfig) -> Result<ExitCode> {
    cfg.preprocess.validate()?;
    let input = required_input(cfg, "recording directory")?;
    let headers = recording_headers(&input)?;
    if headers.is_empty() {
        return Err(Error::Config(format!("no recordings found in {}", input.display())).into());
    }
    let dir = create_run_dir(cfg, "preprocess")?;
    let outputs: Vec<Preprocessed> = headers
        .par_iter()
        .map(|h| {
            let rec = read_tgr(h)?;
            preprocess_recording(&rec, &cfg.preprocess)
        })
        .collect::<Result<_, Error>>()?;
    let labels = outputs[0].channel_labels.clone();
    for (h, o) in headers.iter().zip(&outputs) {
        if o.channel_labels != labels {
            return Err(Error::Format {
                path: h.clone(),
                reason: format!("channels {:?} differ from {:?}", o.channel_labels, labels),
            }
            .into());
        }
    }
    let epochs: usize = outputs.iter().map(|o| o.epochs).sum();
    let skipped: usize = outputs.iter().map(|o| o.skipped).sum();
    let segments: Vec<_> = outputs.into_iter().flat_map(|o| o.segments).collect();
    write_archive(&dir, &segments, &labels, cfg.preprocess.target_rate, &class_names(cfg))?;
    println!("recordings: {}, epochs: {epochs}, skipped: {skipped}, segments: {}", headers.len(), segments.len());
    Ok(ExitCode::SUCCESS)
}

fn check_fits(model: &ModelConfig, archive: &Archive) -> Result<(), Error> {
    let w = archive.manifest.samples_per_segment;
    if model.input_len != w {
        return Err(Error::Config(format!("model.input_len is {} but archive segments hold {w} samples", model.input_len)));
    }
    let k = archive.manifest.class_names.len();
    if k > model.n_classes {
        return Err(Error::Config(format!("archive has {k} classes but model.n_classes is {}", model.n_classes)));
    }
    Ok(())
}

#[derive(Serialize)]
struct ArmRow {
    arm: &'static str,
    accuracy_mean: f64,
    accuracy_std: f64,
    kappa_mean: f64,
    f1_mean: f64,
}

fn train_arm(cfg: &RunConfig, graphs: &[EEGGraph], archive: &Archive, dir: &Path) -> Result<ArmRow> {
    let model = cfg.effective_model();
    check_fits(&model, archive)?;
    let cv = cross_validate(graphs, &model, &cfg.train)?;
    write_reports(dir, &cv, cfg, cfg.train.seed, &archive.manifest.class_names)?;
    for o in &cv.outcomes {
        let meta = CheckpointMeta { seed: cfg.train.seed, fold: Some(o.result.fold), best_epoch: Some(o.result.best_epoch) };
        save_checkpoint(&dir.join(format!("fold{}.ckpt", o.result.fold)), &o.params, &meta)?;
        println!(
            "[{}] fold {}: accuracy {:.4}, kappa {:.4}, best epoch {}/{}",
            cfg.ablation.name(),
            o.result.fold,
            o.result.metrics.accuracy,
            o.result.metrics.kappa,
            o.result.best_epoch,
            o.result.epochs_run
        );
    }
    write_file(&dir.join("splits.json"), to_json(&cv.folds))?;
    let s = &cv.summary;
    println!(
        "[{}] accuracy {:.4} ± {:.4}, kappa {:.4} ± {:.4}, f1 {:.4}",
        cfg.ablation.name(),
        s.accuracy.mean,
        s.accuracy.std,
        s.kappa.mean,
        s.kappa.std,
        s.f1.mean
    );
    Ok(ArmRow {
        arm: cfg.ablation.name(),
        accuracy_mean: s.accuracy.mean,
        accuracy_std: s.accuracy.std,
        kappa_mean: s.kappa.mean,
        f1_mean: s.f1.mean,
    })
}

/// `arms` is `None` for the configured arm alone, or every arm side by side.
pub fn train(cfg: &RunConfig, all_arms: bool) -> Result<ExitCode> {
    cfg.train.validate()?;
    cfg.effective_model().validate()?;
    let input = required_input(cfg, "segment archive")?;
    let archive = read_archive(&input)?;
    check_fits(&cfg.effective_model(), &archive)?;
    let dir = create_run_dir(cfg, "train")?;
    let graphs: Vec<EEGGraph> = archive.segments.iter().map(build_graph).collect();
    info!("{} segments, {} channels", graphs.len(), archive.manifest.channel_labels.len());
    if !all_arms {
        train_arm(cfg, &graphs, &archive, &dir)?;
        return Ok(ExitCode::SUCCESS);
    }
    let mut csv = String::from("arm,accuracy_mean,accuracy_std,kappa_mean,f1_mean\n");
    for arm in Ablation::ALL {
        let arm_cfg = RunConfig { ablation: arm, ..cfg.clone() };
        let arm_dir = dir.join(arm.name());
        fs::create_dir_all(&arm_dir).map_err(|source| Error::Io { path: arm_dir.clone(), source })?;
        write_file(&arm_dir.join("config.json"), arm_cfg.to_pretty_json())?;
        let r = train_arm(&arm_cfg, &graphs, &archive, &arm_dir)?;
        writeln!(csv, "{},{},{},{},{}", r.arm, r.accuracy_mean, r.accuracy_std, r.kappa_mean, r.f1_mean).unwrap();
    }
    write_file(&dir.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

/// `check_config` pairs the checkpoint with the run config's model.
pub fn evaluate_cmd(cfg: &RunConfig, checkpoint: &Path, split: Option<&Path>, check_config: bool) -> Result<ExitCode> {
    let input = required_input(cfg, "segment archive")?;
    let (params, meta) = load_checkpoint(checkpoint)?;
    if check_config {
        params.check_compatible(&cfg.effective_model()).map_err(|e| {
            Error::Config(format!("checkpoint {} does not fit the configured model: {e}", checkpoint.display()))
        })?;
    }
    let archive = read_archive(&input)?;
    check_fits(&params.config, &archive)?;
    let graphs: Vec<EEGGraph> = archive.segments.iter().map(build_graph).collect();
    let idx: Vec<usize> = match split {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })?;
            let folds: Vec<Fold> =
                serde_json::from_str(&text).map_err(|e| Error::Format { path: p.to_path_buf(), reason: e.to_string() })?;
            let k = meta.fold.ok_or_else(|| Error::Config("checkpoint records no fold to select a split".into()))?;
            let fold = folds.get(k).ok_or_else(|| Error::Config(format!("split file has no fold {k}")))?;
            if let Some(&bad) = fold.test.iter().find(|&&i| i >= graphs.len()) {
                return Err(Error::Config(format!("split index {bad} outside an archive of {} segments", graphs.len())).into());
            }
            fold.test.clone()
        }
        None => (0..graphs.len()).collect(),
    };
    let dir = create_run_dir(cfg, "evaluate")?;
    let (loss, preds) = evaluate(&params, &graphs, &idx, cfg.train.batch_size, cfg.train.label_smoothing)?;
    let truth: Vec<usize> = idx.iter().map(|&i| graphs[i].label).collect();
    let metrics = compute_metrics(&confusion_matrix(&truth, &preds, params.config.n_classes)?)?;
    let mut csv = archive.manifest.class_names.join(",") + "\n";
    for row in &metrics.confusion {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        writeln!(csv, "{}", cells.join(",")).unwrap();
    }
    write_file(&dir.join("confusion.csv"), &csv)?;
    let json = to_json(&metrics);
    write_file(&dir.join("metrics.json"), &json)?;
    info!("evaluated {} segments, loss {loss:.6}", idx.len());
    print!("{json}");
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(cfg: &RunConfig, draws: u64, per_group: usize, fault: Option<&str>) -> Result<ExitCode> {
    let fault = match fault {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Error::Config(format!("unknown op `{name}`")))?),
        None => None,
    };
    let dir = create_run_dir(cfg, "gradcheck")?;
    let model = ModelConfig::default();
    let mut entries: Vec<CheckEntry> = op_suite(fault, draws).context("op gradient checks")?;
    let batch = random_batch(4, 2, model.input_len, 11)?;
    entries.extend(model_suite(&model, &batch, fault, 3, per_group).context("model gradient checks")?);
    for e in &entries {
        println!(
            "{:<32} {:>10.3e} {:>6} {}",
            e.name,
            e.max_rel_error,
            e.coordinates,
            if e.passed() { "ok" } else { "FAIL" }
        );
    }
    write_file(&dir.join("gradcheck.json"), to_json(&entries))?;
    let worst = entries.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).expect("non-empty suite");
    println!("worst: {} {:.3e} (tolerance {TOLERANCE:e})", worst.name, worst.max_rel_error);
    let failed = entries.iter().filter(|e| !e.passed()).count();
    if failed > 0 {
        println!("{failed} of {} checks failed", entries.len());
        return Ok(ExitCode::from(1));
    }
    println!("all {} checks passed", entries.len());
    Ok(ExitCode::SUCCESS)
}
