//! Result files of a cross-validation run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{CrossValidation, Summary};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct FoldEntry<'a> {
    fold: usize,
    best_epoch: usize,
    epochs_run: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    metrics: &'a super::Metrics,
}

#[derive(Serialize)]
struct SummaryFile<'a, C: Serialize> {
    seed: u64,
    config: &'a C,
    folds: Vec<FoldEntry<'a>>,
    summary: &'a Summary,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `summary.json`, `fold<k>_confusion.csv`, `fold<k>_history.csv` and
/// `fold_accuracies.csv` into `dir`. Nothing time-dependent is written, so
/// equal runs produce identical bytes.
pub fn write_reports<C: Serialize>(
    dir: &Path,
    cv: &CrossValidation,
    config: &C,
    seed: u64,
    class_names: &[String],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = SummaryFile {
        seed,
        config,
        folds: cv
            .outcomes
            .iter()
            .map(|o| {
                let r = &o.result;
                FoldEntry {
                    fold: r.fold,
                    best_epoch: r.best_epoch,
                    epochs_run: r.epochs_run,
                    n_train: r.n_train,
                    n_val: r.n_val,
                    n_test: r.n_test,
                    metrics: &r.metrics,
                }
            })
            .collect(),
        summary: &cv.summary,
    };
    let json = serde_json::to_string_pretty(&file).expect("summary serializes");
    write(&dir.join("summary.json"), &(json + "\n"))?;

    let mut accuracies = String::new();
    for o in &cv.outcomes {
        let r = &o.result;
        let mut csv = String::new();
        writeln!(csv, "{}", class_names.join(",")).unwrap();
        for row in &r.metrics.confusion {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(csv, "{}", cells.join(",")).unwrap();
        }
        write(&dir.join(format!("fold{}_confusion.csv", r.fold)), &csv)?;

        let mut hist = String::from("epoch,train_loss,val_loss,lr\n");
        for h in &r.history {
            writeln!(hist, "{},{},{},{}", h.epoch, h.train_loss, h.val_loss, h.lr).unwrap();
        }
        write(&dir.join(format!("fold{}_history.csv", r.fold)), &hist)?;
        writeln!(accuracies, "{}", r.metrics.accuracy).unwrap();
    }
    write(&dir.join("fold_accuracies.csv"), &accuracies)
}
