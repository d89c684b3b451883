use std::collections::BTreeSet;

use eeg_tgat::graph::{batch_graphs, full_edges, EEGGraph};
use eeg_tgat::model::ModelConfig;
use eeg_tgat::model::ModelParams;
use eeg_tgat::numerics::{grad_check, stream, OpRng, Tensor};
use eeg_tgat::train::*;
use eeg_tgat::Error;
use indexmap::IndexMap;
use proptest::prelude::*;
use rand::Rng;

// ---- AdamW -------------------------------------------------------------------

fn named(pairs: &[(&str, Vec<f64>)]) -> IndexMap<String, Tensor> {
    pairs.iter().map(|(n, v)| (n.to_string(), Tensor::from_vec(v.clone()))).collect()
}

fn default_opt() -> AdamW {
    AdamW::from_config(&TrainConfig::default())
}

#[test]
fn zero_learning_rate_is_bit_exact_identity() {
    let mut p = named(&[("a", vec![0.3, -1.7, 1e-300]), ("b", vec![42.0])]);
    let before = p.clone();
    let g = named(&[("a", vec![5.0, -2.0, 1.0]), ("b", vec![0.1])]);
    let mut st = AdamWState::default();
    for _ in 0..3 {
        adamw_step(&mut p, &g, &mut st, 0.0, &default_opt()).unwrap();
    }
    assert_eq!(p, before);
    assert_eq!(st.t, 3);
}

#[test]
fn adamw_matches_scalar_recurrence() {
    // moments and update written out directly for a 5-step gradient sequence
    let gs = [0.5, -0.2, 0.8, 0.0, 1.5];
    let (lr, wd, b1, b2, eps) = (3e-4, 1e-3, 0.9, 0.999, 1e-8);
    let (mut w, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
    let mut p = named(&[("w", vec![0.7])]);
    let mut st = AdamWState::default();
    for (t, &g) in gs.iter().enumerate() {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32 + 1));
        let vh = v / (1.0 - b2.powi(t as i32 + 1));
        w = w - lr * mh / (vh.sqrt() + eps) - lr * wd * w;
        adamw_step(&mut p, &named(&[("w", vec![g])]), &mut st, lr, &default_opt()).unwrap();
        assert!((p["w"].data()[0] - w).abs() < 1e-15);
    }
    assert!((0.9996997 - {
        let mut q = named(&[("w", vec![1.0])]);
        adamw_step(&mut q, &named(&[("w", vec![0.5])]), &mut AdamWState::default(), lr, &default_opt()).unwrap();
        q["w"].data()[0]
    })
    .abs()
        < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn identical_parameters_stay_identical(grads in prop::collection::vec(-3.0f64..3.0, 1..20), w in -2.0f64..2.0) {
        let mut p = named(&[("a", vec![w]), ("b", vec![w])]);
        let mut st = AdamWState::default();
        for g in grads {
            adamw_step(&mut p, &named(&[("a", vec![g]), ("b", vec![g])]), &mut st, 1e-2, &default_opt()).unwrap();
        }
        prop_assert_eq!(p["a"].data(), p["b"].data());
    }
}

// ---- loss --------------------------------------------------------------------

#[test]
fn smoothed_ce_examples() {
    let two = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    for eps in [0.0, 0.1, 0.7] {
        assert!((label_smoothed_ce(&two, &[1], eps).unwrap().0 - 2f64.ln()).abs() < 1e-15);
    }
    let l = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let lse = (1.0 + (-2f64).exp()).ln();
    let want = 0.95 * lse + 0.05 * (2.0 + lse);
    let got = label_smoothed_ce(&l, &[0], 0.1).unwrap().0;
    assert!((got - want).abs() < 1e-14);
    // printed value is truncated at six decimals
    assert!((got - 0.226927).abs() < 2e-6);
    assert!(matches!(label_smoothed_ce(&l, &[0], 1.0), Err(Error::Param(_))));
    assert!(matches!(label_smoothed_ce(&l, &[0], -0.1), Err(Error::Param(_))));
}

#[test]
fn unsmoothed_ce_is_plain_cross_entropy() {
    let mut rng = stream(3, &[]);
    let logits = Tensor::uniform(&[6, 3], -3.0, 3.0, &mut rng);
    let targets = [0, 2, 1, 1, 0, 2];
    let plain: f64 = targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = &logits.data()[r * 3..r * 3 + 3];
            -(row[t].exp() / row.iter().map(|v| v.exp()).sum::<f64>()).ln()
        })
        .sum::<f64>()
        / 6.0;
    assert!((label_smoothed_ce(&logits, &targets, 0.0).unwrap().0 - plain).abs() < 1e-12);
}

#[test]
fn smoothed_ce_gradient_matches_finite_differences() {
    let targets = [1, 0, 2, 2];
    for seed in 0..10 {
        let logits = Tensor::uniform(&[4, 3], -2.0, 2.0, &mut stream(seed, &[]));
        let (_, grad) = label_smoothed_ce(&logits, &targets, 0.1).unwrap();
        let report = grad_check(|t, v| t.cross_entropy(v[0], &targets, 0.1), std::slice::from_ref(&logits), 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-6);
        // the standalone gradient equals the tape's
        let mut tape = eeg_tgat::numerics::Tape::new();
        let x = tape.leaf(logits);
        let loss = tape.cross_entropy(x, &targets, 0.1).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().max_abs_diff(&grad) < 1e-15);
    }
}

// ---- splits ------------------------------------------------------------------

fn trial_ids(trials: usize, per_trial: usize) -> Vec<u64> {
    (0..trials).flat_map(|t| std::iter::repeat_n(t as u64 * 7 + 3, per_trial)).collect()
}

fn fold_trials(ids: &[u64], idx: &[usize]) -> BTreeSet<u64> {
    idx.iter().map(|&i| ids[i]).collect()
}

#[test]
fn kfold_trial_counts() {
    let ids = trial_ids(10, 6);
    let folds = grouped_kfold(&ids, 5, &mut stream(1, &[])).unwrap();
    assert!(folds.iter().all(|f| fold_trials(&ids, &f.test).len() == 2));

    let ids = trial_ids(11, 6);
    let folds = grouped_kfold(&ids, 5, &mut stream(1, &[])).unwrap();
    let mut sizes: Vec<usize> = folds.iter().map(|f| fold_trials(&ids, &f.test).len()).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    assert!(matches!(grouped_kfold(&trial_ids(4, 6), 5, &mut stream(1, &[])), Err(Error::Split(_))));
    assert_eq!(folds, grouped_kfold(&ids, 5, &mut stream(1, &[])).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kfold_is_a_leakage_free_partition(trials in 5usize..40, per in 1usize..7, k in 2usize..6, seed in any::<u64>()) {
        let ids = trial_ids(trials, per);
        let folds = grouped_kfold(&ids, k, &mut stream(seed, &[])).unwrap();
        let mut seen = vec![0; ids.len()];
        for f in &folds {
            prop_assert!(fold_trials(&ids, &f.train).is_disjoint(&fold_trials(&ids, &f.test)));
            prop_assert_eq!(f.train.len() + f.test.len(), ids.len());
            for &i in &f.test {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        let sizes: Vec<usize> = folds.iter().map(|f| fold_trials(&ids, &f.test).len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn holdout_is_grouped_and_validated() {
    let ids = trial_ids(10, 3);
    let idx: Vec<usize> = (0..ids.len()).collect();
    let (tr, va) = grouped_holdout(&idx, &ids, 0.2, &mut stream(2, &[])).unwrap();
    assert_eq!(fold_trials(&ids, &va).len(), 2);
    assert!(fold_trials(&ids, &tr).is_disjoint(&fold_trials(&ids, &va)));
    assert_eq!(tr.len() + va.len(), idx.len());
    assert!(matches!(grouped_holdout(&idx[..3], &ids, 0.2, &mut stream(2, &[])), Err(Error::Config(_))));
}

// ---- metrics -----------------------------------------------------------------

fn oracle(truth: &[usize], pred: &[usize], k: usize) -> [f64; 5] {
    // per-sample definitions, no confusion matrix
    let n = truth.len() as f64;
    let acc = truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / n;
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    let mut pe = 0.0;
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let pp = pred.iter().filter(|&&p| p == c).count() as f64;
        let ap = truth.iter().filter(|&&t| t == c).count() as f64;
        let prec = if pp > 0.0 { tp / pp } else { 0.0 };
        let rec = if ap > 0.0 { tp / ap } else { 0.0 };
        ps += prec;
        rs += rec;
        fs += if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        pe += (pp / n) * (ap / n);
    }
    let kappa = if pe == 1.0 { 0.0 } else { (acc - pe) / (1.0 - pe) };
    [acc, ps / k as f64, rs / k as f64, fs / k as f64, kappa]
}

#[test]
fn metrics_match_per_sample_oracle() {
    let mut rng = stream(5, &[]);
    for _ in 0..1000 {
        let k = rng.gen_range(2..5);
        let n = rng.gen_range(1..60);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let m = compute_metrics(&confusion_matrix(&truth, &pred, k).unwrap()).unwrap();
        let o = oracle(&truth, &pred, k);
        for (a, b) in [m.accuracy, m.precision, m.recall, m.f1, m.kappa].iter().zip(o) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let support: Vec<u64> = (0..k).map(|c| truth.iter().filter(|&&t| t == c).count() as u64).collect();
        assert_eq!(m.confusion.iter().map(|r| r.iter().sum::<u64>()).collect::<Vec<_>>(), support);
    }
}

#[test]
fn metrics_examples() {
    let m = compute_metrics(&[vec![40, 10], vec![10, 40]]).unwrap();
    assert!((m.accuracy - 0.8).abs() < 1e-12);
    assert!((m.kappa - 0.6).abs() < 1e-12);
    assert!((m.f1 - 0.8).abs() < 1e-12);
    let m = compute_metrics(&[vec![7, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap();
    assert_eq!((m.accuracy, m.kappa), (1.0, 1.0));
    let m = compute_metrics(&[vec![25, 0], vec![25, 0]]).unwrap();
    assert_eq!(m.kappa, 0.0);
    assert_eq!(compute_metrics(&[vec![5, 0], vec![0, 0]]).unwrap().kappa, 0.0);
    assert!(matches!(compute_metrics(&[vec![1, -1], vec![0, 2]]), Err(Error::Statistics(_))));
}

#[test]
fn metrics_invariant_to_class_relabeling() {
    let mut rng = stream(6, &[]);
    for _ in 0..200 {
        let truth: Vec<usize> = (0..40).map(|_| rng.gen_range(0..3)).collect();
        let pred: Vec<usize> = (0..40).map(|_| rng.gen_range(0..3)).collect();
        let perm = [2, 0, 1];
        let a = compute_metrics(&confusion_matrix(&truth, &pred, 3).unwrap()).unwrap();
        let pt: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        let pp: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        let b = compute_metrics(&confusion_matrix(&pt, &pp, 3).unwrap()).unwrap();
        for (x, y) in [(a.accuracy, b.accuracy), (a.precision, b.precision), (a.recall, b.recall), (a.f1, b.f1), (a.kappa, b.kappa)] {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn population_std_oracle() {
    let v = [0.7, 0.9, 0.8, 0.6, 1.0];
    let s = MeanStd::of(&v);
    assert!((s.mean - 0.8).abs() < 1e-15);
    assert!((s.std - 0.02f64.sqrt()).abs() < 1e-15);
}

// ---- training ----------------------------------------------------------------

fn small_model() -> ModelConfig {
    ModelConfig {
        input_len: 64,
        encoder_features: [4, 4, 4],
        gat_heads: 2,
        gat_head_dim: 4,
        gat2_dim: 8,
        classifier_hidden: 8,
        ..Default::default()
    }
}

/// Class 1 carries a 12 Hz tone on two of three channels.
fn toy_graphs(trials: usize, per_trial: usize, seed: u64) -> Vec<EEGGraph> {
    let mut rng = stream(seed, &[]);
    let mut out = Vec::new();
    for t in 0..trials {
        let label = t % 2;
        for _ in 0..per_trial {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let node_features = (0..3)
                .map(|c| {
                    (0..64)
                        .map(|i| {
                            let tone = if label == 1 && c < 2 { 1.5 * (0.2 * i as f64 + phase).sin() } else { 0.0 };
                            tone + rng.gen_range(-1.0..1.0)
                        })
                        .collect()
                })
                .collect();
            out.push(EEGGraph { node_features, edges: full_edges(3), label, trial_id: t as u64, subject_id: 0 });
        }
    }
    out
}

fn quick_train() -> TrainConfig {
    TrainConfig { max_epochs: 10, batch_size: 8, learning_rate: 3e-3, seed: 9, ..Default::default() }
}

#[test]
fn loss_on_fixed_batch_decreases_for_five_steps() {
    let cfg = ModelConfig::default();
    let graphs: Vec<EEGGraph> = toy_graphs(4, 1, 1)
        .into_iter()
        .map(|g| EEGGraph {
            node_features: g.node_features.iter().map(|r| r.iter().cycle().take(256).copied().collect()).collect(),
            ..g
        })
        .collect();
    let batch = batch_graphs(&graphs).unwrap();
    let mut params = ModelParams::init(&cfg, 4).unwrap();
    let mut state = AdamWState::default();
    let tc = TrainConfig::default();
    let losses: Vec<f64> = (0..6)
        .map(|_| train_step(&mut params, &mut state, &batch, 3e-4, &tc, &mut OpRng::new(1, &[])).unwrap())
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn train_fold_is_deterministic_and_learns() {
    let graphs = toy_graphs(20, 2, 2);
    let ids: Vec<u64> = graphs.iter().map(|g| g.trial_id).collect();
    let folds = grouped_kfold(&ids, 5, &mut stream(0, &[])).unwrap();
    let cfg = quick_train();
    let a = train_fold(&graphs, &folds[0], 0, &small_model(), &cfg).unwrap();
    let b = train_fold(&graphs, &folds[0], 0, &small_model(), &cfg).unwrap();
    assert_eq!(a.result, b.result);
    assert_eq!(a.params, b.params);
    let r = &a.result;
    assert_eq!(r.history.len(), r.epochs_run);
    assert!(r.epochs_run <= cfg.max_epochs && r.best_epoch <= r.epochs_run && r.best_epoch >= 1);
    let best_val = r.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    assert!(best_val < r.initial_val_loss, "{best_val} vs {}", r.initial_val_loss);
    assert_eq!(r.n_train + r.n_val, folds[0].train.len());
    assert_eq!(r.n_test, folds[0].test.len());
}

#[test]
fn restored_parameters_equal_best_epoch_snapshot() {
    let graphs = toy_graphs(20, 2, 3);
    let ids: Vec<u64> = graphs.iter().map(|g| g.trial_id).collect();
    let folds = grouped_kfold(&ids, 5, &mut stream(0, &[])).unwrap();
    let cfg = TrainConfig { early_stop_patience: 2, ..quick_train() };
    let full = train_fold(&graphs, &folds[1], 1, &small_model(), &cfg).unwrap();
    let best = full.result.best_epoch;
    let cut = TrainConfig { max_epochs: best, ..cfg };
    let short = train_fold(&graphs, &folds[1], 1, &small_model(), &cut).unwrap();
    assert_eq!(full.params, short.params);
    let (_, preds) = evaluate(&full.params, &graphs, &folds[1].test, 8, 0.1).unwrap();
    assert_eq!(preds, full.test_predictions);
}

#[test]
fn nan_input_reports_divergence_with_context() {
    let mut graphs = toy_graphs(10, 2, 4);
    for g in graphs.iter_mut() {
        g.node_features[0][5] = f64::NAN;
    }
    let ids: Vec<u64> = graphs.iter().map(|g| g.trial_id).collect();
    let folds = grouped_kfold(&ids, 5, &mut stream(0, &[])).unwrap();
    let err = train_fold(&graphs, &folds[2], 2, &small_model(), &quick_train()).unwrap_err();
    assert!(matches!(err, Error::Diverged { fold: 2, .. }), "{err}");
}

#[test]
fn cross_validation_and_reports() {
    let graphs = toy_graphs(15, 2, 5);
    let cfg = TrainConfig { max_epochs: 3, ..quick_train() };
    let cv = cross_validate(&graphs, &small_model(), &cfg).unwrap();
    assert_eq!(cv.outcomes.len(), 5);
    let accs: Vec<f64> = cv.outcomes.iter().map(|o| o.result.metrics.accuracy).collect();
    assert!((cv.summary.accuracy.mean - accs.iter().sum::<f64>() / 5.0).abs() < 1e-15);
    let mut seen = BTreeSet::new();
    for f in &cv.folds {
        for &i in &f.test {
            assert!(seen.insert(i));
        }
    }
    assert_eq!(seen.len(), graphs.len());

    let dir = tempfile::tempdir().unwrap();
    let names = vec!["class0".to_string(), "class1".to_string()];
    write_reports(dir.path(), &cv, &cfg, cfg.seed, &names).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["folds"].as_array().unwrap().len(), 5);
    let conf = std::fs::read_to_string(dir.path().join("fold0_confusion.csv")).unwrap();
    assert_eq!(conf.lines().next().unwrap(), "class0,class1");
    assert_eq!(conf.lines().count(), 3);
    let hist = std::fs::read_to_string(dir.path().join("fold4_history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + cv.outcomes[4].result.epochs_run);
    let accs_file = std::fs::read_to_string(dir.path().join("fold_accuracies.csv")).unwrap();
    let parsed: Vec<f64> = accs_file.lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(parsed, accs);
}

#[test]
fn invalid_train_config_rejected() {
    for bad in [
        TrainConfig { label_smoothing: 1.0, ..Default::default() },
        TrainConfig { scheduler_factor: 1.0, ..Default::default() },
        TrainConfig { k_folds: 1, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
