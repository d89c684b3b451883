use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification quality of one confusion matrix (rows = truth,
/// columns = prediction). Precision, recall and F1 are macro averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<u64>>,
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Vec<Vec<i64>>> {
    if truth.len() != predicted.len() {
        return Err(Error::Shape(format!("{} labels against {} predictions", truth.len(), predicted.len())));
    }
    let mut m = vec![vec![0i64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Index(format!("class pair ({t}, {p}) outside 0..{n_classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

pub fn compute_metrics(confusion: &[Vec<i64>]) -> Result<Metrics> {
    let k = confusion.len();
    if k == 0 || confusion.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
    }
    if confusion.iter().flatten().any(|&c| c < 0) {
        return Err(Error::Statistics("confusion matrix has negative counts".into()));
    }
    let total: i64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Statistics("confusion matrix is empty".into()));
    }
    let n = total as f64;
    let row: Vec<f64> = confusion.iter().map(|r| r.iter().sum::<i64>() as f64).collect();
    let col: Vec<f64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum::<i64>() as f64).collect();
    let diag: Vec<f64> = (0..k).map(|i| confusion[i][i] as f64).collect();
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let precision: Vec<f64> = (0..k).map(|i| ratio(diag[i], col[i])).collect();
    let recall: Vec<f64> = (0..k).map(|i| ratio(diag[i], row[i])).collect();
    let f1: Vec<f64> = (0..k).map(|i| ratio(2.0 * precision[i] * recall[i], precision[i] + recall[i])).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
    let p_o = diag.iter().sum::<f64>() / n;
    let p_e = (0..k).map(|i| row[i] * col[i]).sum::<f64>() / (n * n);
    let kappa = if p_e == 1.0 { 0.0 } else { (p_o - p_e) / (1.0 - p_e) };
    Ok(Metrics {
        accuracy: p_o,
        precision: mean(&precision),
        recall: mean(&recall),
        f1: mean(&f1),
        kappa,
        confusion: confusion.iter().map(|r| r.iter().map(|&c| c as u64).collect()).collect(),
    })
}
