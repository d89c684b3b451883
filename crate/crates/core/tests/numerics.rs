use eeg_tgat::numerics::{
    dropout, grad_check, stream, BatchNormState, DropoutGranularity, Mode, OpKind, Padding, Tape,
    Tensor, Var,
};
use eeg_tgat::Error;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, &[0xC0FFEE]);
    Tensor::uniform(shape, -1.5, 1.5, &mut rng)
}

/// Contracts an op output with fixed random weights so grad_check sees a scalar.
fn project(tape: &mut Tape, y: Var, seed: u64) -> eeg_tgat::Result<Var> {
    let w = rand_tensor(tape.shape(y), seed ^ 0x5151);
    let w = tape.constant(w);
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    c
}

#[test]
fn matmul_identity_zero_and_naive() {
    let mut tape = Tape::new();
    let a = tape.constant(rand_tensor(&[2, 2], 1));
    let i = tape.constant(Tensor::eye(2));
    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let ai = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(ai), tape.value(a));
    let az = tape.matmul(a, z).unwrap();
    assert!(tape.value(az).data().iter().all(|&v| v == 0.0));

    let x = rand_tensor(&[3, 4], 2);
    let y = rand_tensor(&[4, 2], 3);
    let oracle = naive_matmul(&x, &y);
    let (xv, yv) = (tape.constant(x), tape.constant(y));
    let c = tape.matmul(xv, yv).unwrap();
    for (u, v) in tape.value(c).data().iter().zip(&oracle) {
        assert!((u - v).abs() < 1e-12);
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape(_)));
    assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2, "{msg}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::from_vec(vec![0.7; 3]));
    let s = tape.softmax(c, 0).unwrap();
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::from_vec(vec![0.0, 2f64.ln()]));
    let s = tape.softmax(x, 0).unwrap();
    assert!((tape.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((tape.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let r = rand_tensor(&[7], 4);
    let denom: f64 = r.data().iter().map(|v| v.exp()).sum();
    let rv = tape.constant(r.clone());
    let s = tape.softmax(rv, 0).unwrap();
    for (o, x) in tape.value(s).data().iter().zip(r.data()) {
        assert!((o - x.exp() / denom).abs() < 1e-12);
    }
}

#[test]
fn softmax_rejects_nan_and_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![0.0, f64::NAN]));
    assert!(matches!(tape.softmax(x, 0), Err(Error::Numeric(_))));
    let y = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.softmax(y, 2), Err(Error::Shape(_))));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![-2.0, 3.0]));
    let a = tape.constant(Tensor::from_vec(vec![0.25]));
    let p = tape.prelu(x, a, 0).unwrap();
    assert_eq!(tape.value(p).data(), &[-0.5, 3.0]);

    let z = tape.constant(Tensor::from_vec(vec![0.0]));
    let e = tape.elu(z, 1.0);
    assert_eq!(tape.value(e).data(), &[0.0]);

    let r = rand_tensor(&[20], 5);
    let rv = tape.constant(r.clone());
    let l = tape.leaky_relu(rv, 0.2);
    for (o, x) in tape.value(l).data().iter().zip(r.data()) {
        let expected = if *x > 0.0 { *x } else { 0.2 * x };
        assert_eq!(*o, expected);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::ones(&[5]));
    let beta = tape.constant(Tensor::zeros(&[5]));
    let c = tape.constant(Tensor::full(&[1, 5], 3.2));
    let y = tape.layer_norm(c, gamma, beta, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = rand_tensor(&[4, 5], 6);
    let xv = tape.constant(x.clone());
    // eps tiny so the normalized output is the pure standardization
    let y = tape.layer_norm(xv, gamma, beta, 1e-300).unwrap();
    for row in tape.value(y).data().chunks(5) {
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    let g = rand_tensor(&[5], 7);
    let b = rand_tensor(&[5], 8);
    let (gv, bv) = (tape.constant(g.clone()), tape.constant(b.clone()));
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    for (r, row) in x.data().chunks(5).enumerate() {
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for c in 0..5 {
            let expected = g.data()[c] * (row[c] - mean) / (var + 1e-5).sqrt() + b.data()[c];
            assert!((tape.value(y).data()[r * 5 + c] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn batch_norm_eval_identity_and_train_statistics() {
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::ones(&[3]));
    let beta = tape.constant(Tensor::zeros(&[3]));
    let x = rand_tensor(&[4, 3, 5], 9);
    let xv = tape.constant(x.clone());
    let mut state = BatchNormState::new(3, 0.1);
    let y = tape.batch_norm(xv, gamma, beta, &mut state, Mode::Eval, 0.0).unwrap();
    assert_eq!(tape.value(y), &x);

    let y = tape.batch_norm(xv, gamma, beta, &mut state, Mode::Train, 1e-300).unwrap();
    let out = tape.value(y).data();
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..5).map(move |t| (n, t))).map(|(n, t)| out[(n * 3 + ch) * 5 + t]).collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    // running update: r ← (1 − m)·r + m·stat, unbiased variance
    for ch in 0..3 {
        let xd = x.data();
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..5).map(move |t| xd[(n * 3 + ch) * 5 + t])).collect();
        let mean = vals.iter().sum::<f64>() / 20.0;
        let uvar = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19.0;
        assert!((state.running_mean[ch] - 0.1 * mean).abs() < 1e-12);
        assert!((state.running_var[ch] - (0.9 + 0.1 * uvar)).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_rejects_single_sample_training() {
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::ones(&[2]));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::ones(&[1, 2, 4]));
    let mut state = BatchNormState::new(2, 0.1);
    let err = tape.batch_norm(x, gamma, beta, &mut state, Mode::Train, 1e-5).unwrap_err();
    assert!(matches!(err, Error::Statistics(_)));
}

fn naive_conv(x: &Tensor, w: &Tensor, pad_left: usize) -> Vec<f64> {
    let (n, cin, t) = (x.dim(0), x.dim(1), x.dim(2));
    let (cout, k) = (w.dim(0), w.dim(2));
    let mut out = vec![0.0; n * cout * t];
    for s in 0..n {
        for o in 0..cout {
            for tt in 0..t {
                let mut acc = 0.0;
                for i in 0..cin {
                    for j in 0..k {
                        let src = tt as isize + j as isize - pad_left as isize;
                        if src >= 0 && (src as usize) < t {
                            acc += w.data()[(o * cin + i) * k + j] * x.data()[(s * cin + i) * t + src as usize];
                        }
                    }
                }
                out[(s * cout + o) * t + tt] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_temporal_examples() {
    let mut tape = Tape::new();
    let x = rand_tensor(&[2, 1, 17], 10);
    let xv = tape.constant(x.clone());
    let mut delta = Tensor::zeros(&[1, 1, 5]);
    delta.data_mut()[2] = 1.0;
    let d = tape.constant(delta);
    let y = tape.conv_temporal(xv, d, Padding::Same).unwrap();
    assert_eq!(tape.value(y), &x);

    let ones = tape.constant(Tensor::ones(&[1, 1, 6]));
    let k3 = tape.constant(Tensor::ones(&[1, 1, 3]));
    let y = tape.conv_temporal(ones, k3, Padding::Same).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 3.0, 2.0]);

    // long kernels take the frequency-domain path
    for (k, seed) in [(3, 11), (4, 12), (9, 13), (16, 14), (21, 15)] {
        let x = rand_tensor(&[2, 3, 21], seed);
        let w = rand_tensor(&[4, 3, k], seed + 100);
        let oracle = naive_conv(&x, &w, (k - 1) / 2);
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let y = tape.conv_temporal(xv, wv, Padding::Same).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 21]);
        for (a, b) in tape.value(y).data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn valid_conv_is_a_window_of_same_conv() {
    for k in [5, 16, 20] {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 3, 30], k as u64));
        let w = tape.constant(rand_tensor(&[2, 3, k], 50 + k as u64));
        let same = tape.conv_temporal(x, w, Padding::Same).unwrap();
        let valid = tape.conv_temporal(x, w, Padding::Valid).unwrap();
        let t_out = 30 - k + 1;
        assert_eq!(tape.shape(valid), &[2, 2, t_out]);
        let p = (k - 1) / 2;
        for row in 0..4 {
            for t in 0..t_out {
                let a = tape.value(valid).data()[row * t_out + t];
                let b = tape.value(same).data()[row * 30 + t + p];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_temporal_rejects_long_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 4]));
    let w = tape.constant(Tensor::ones(&[1, 1, 5]));
    assert!(matches!(tape.conv_temporal(x, w, Padding::Valid), Err(Error::Shape(_))));
}

#[test]
fn depthwise_spatial_examples() {
    let mut tape = Tape::new();
    let x = rand_tensor(&[2, 5, 3, 4], 14);
    let xv = tape.constant(x.clone());
    let mut delta = Tensor::zeros(&[3, 3]);
    for m in 0..3 {
        delta.data_mut()[m * 3 + 1] = 1.0;
    }
    let dv = tape.constant(delta);
    let y = tape.depthwise_conv_spatial(xv, dv).unwrap();
    assert_eq!(tape.value(y), &x);

    let zero = tape.constant(Tensor::zeros(&[3, 3]));
    let y = tape.depthwise_conv_spatial(xv, zero).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // single map, constant kernel: scaled moving sum across channels
    let x1 = rand_tensor(&[1, 6, 1, 4], 15);
    let xv1 = tape.constant(x1.clone());
    let kc = tape.constant(Tensor::full(&[1, 3], 0.5));
    let y = tape.depthwise_conv_spatial(xv1, kc).unwrap();
    for c in 0..6usize {
        for t in 0..4 {
            let mut acc = 0.0;
            for nb in c.saturating_sub(1)..=(c + 1).min(5) {
                acc += x1.data()[nb * 4 + t];
            }
            assert!((tape.value(y).data()[c * 4 + t] - 0.5 * acc).abs() < 1e-14);
        }
    }

    let wrong = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.depthwise_conv_spatial(xv, wrong), Err(Error::Shape(_))));
}

#[test]
fn dropout_contracts() {
    let mut tape = Tape::new();
    let mut rng = stream(16, &[]);
    let x = tape.constant(rand_tensor(&[10, 4, 8], 16));
    let same = dropout(&mut tape, x, 0.0, DropoutGranularity::Element, Mode::Train, &mut rng).unwrap();
    assert_eq!(tape.value(same), tape.value(x));
    for p in [0.1, 0.5, 0.9] {
        let y = dropout(&mut tape, x, p, DropoutGranularity::Channel, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }
    assert!(matches!(
        dropout(&mut tape, x, 1.0, DropoutGranularity::Element, Mode::Train, &mut rng),
        Err(Error::Param(_))
    ));

    let ones = tape.constant(Tensor::ones(&[100_000]));
    let y = dropout(&mut tape, ones, 0.3, DropoutGranularity::Element, Mode::Train, &mut rng).unwrap();
    let vals = tape.value(y).data();
    let dropped = vals.iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
    assert!((dropped - 0.3).abs() < 0.01, "{dropped}");
    let survivors: Vec<f64> = vals.iter().copied().filter(|&v| v != 0.0).collect();
    let scale = survivors.iter().sum::<f64>() / survivors.len() as f64;
    assert!((scale * 0.7 - 1.0).abs() < 0.02);

    // channel granularity zeroes whole trailing blocks
    let y = dropout(&mut tape, x, 0.5, DropoutGranularity::Channel, Mode::Train, &mut rng).unwrap();
    for block in tape.value(y).data().chunks(8) {
        let zeros = block.iter().filter(|&&v| v == 0.0).count();
        assert!(zeros == 0 || zeros == 8);
    }
}

#[test]
fn dropout_deterministic_under_seed() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[64]));
        let mut rng = stream(99, &[1, 2, 3]);
        let y = dropout(&mut tape, x, 0.4, DropoutGranularity::Element, Mode::Train, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn mean_pool_examples() {
    let mut tape = Tape::new();
    let x = rand_tensor(&[3, 1, 4], 17);
    let xv = tape.constant(x.clone());
    let y = tape.mean_pool(xv, 1).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let c = tape.constant(Tensor::full(&[2, 5], 1.75));
    let y = tape.mean_pool(c, 1).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 1.75));

    let r = rand_tensor(&[4, 6, 3], 18);
    let rv = tape.constant(r.clone());
    let y = tape.mean_pool(rv, 1).unwrap();
    for o in 0..4 {
        for i in 0..3 {
            let s: f64 = (0..6).map(|t| r.data()[(o * 6 + t) * 3 + i]).sum();
            assert!((tape.value(y).data()[o * 3 + i] - s / 6.0).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_simple_cases() {
    let mut tape = Tape::new();
    let x = tape.leaf(rand_tensor(&[3, 2], 19));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut tape = Tape::new();
    let xc = rand_tensor(&[1, 4], 20);
    let w = tape.leaf(rand_tensor(&[4, 1], 21));
    let xv = tape.constant(xc.clone());
    let y = tape.matmul(xv, w).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(w).unwrap().data(), xc.data());
    assert!(g.get(xv).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn shared_node_accumulates_both_paths() {
    let x0 = rand_tensor(&[5], 22);
    let path = |which: u8| {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let a = tape.elu(x, 1.0);
        let b = tape.scale(x, -2.5);
        let b = tape.mul(b, x).unwrap();
        let out = match which {
            0 => tape.sum(a),
            1 => tape.sum(b),
            _ => {
                let sa = tape.sum(a);
                let sb = tape.sum(b);
                tape.add(sa, sb).unwrap()
            }
        };
        tape.backward(out).unwrap().take(x).unwrap()
    };
    let (ga, gb, gab) = (path(0), path(1), path(2));
    for i in 0..5 {
        assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-12);
    }
}

fn check_op(seeds: std::ops::Range<u64>, shapes: &[&[usize]], op: impl Fn(&mut Tape, &[Var], u64) -> eeg_tgat::Result<Var>) -> f64 {
    let mut worst = 0.0f64;
    for seed in seeds {
        let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| rand_tensor(s, seed * 31 + i as u64)).collect();
        let report = grad_check(
            |t, v| {
                let y = op(t, v, seed)?;
                project(t, y, seed)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}

#[test]
fn every_op_passes_gradient_check_on_ten_draws() {
    let cases: Vec<(&str, f64)> = vec![
        ("matmul", check_op(0..10, &[&[3, 4], &[4, 2]], |t, v, _| t.matmul(v[0], v[1]))),
        ("batch_matmul", check_op(0..10, &[&[2, 3, 4], &[2, 4, 2]], |t, v, _| t.batch_matmul(v[0], v[1]))),
        ("add_bias", check_op(0..10, &[&[3, 4], &[4]], |t, v, _| t.add_bias(v[0], v[1]))),
        ("softmax", check_op(0..10, &[&[3, 4, 2]], |t, v, _| t.softmax(v[0], 1))),
        ("elu", check_op(0..10, &[&[12]], |t, v, _| Ok(t.elu(v[0], 1.0)))),
        ("leaky_relu", check_op(0..10, &[&[12]], |t, v, _| Ok(t.leaky_relu(v[0], 0.2)))),
        ("prelu", check_op(0..10, &[&[2, 3, 4], &[3]], |t, v, _| t.prelu(v[0], v[1], 1))),
        ("layer_norm", check_op(0..10, &[&[3, 6], &[6], &[6]], |t, v, _| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("batch_norm_train", check_op(0..10, &[&[4, 3, 5], &[3], &[3]], |t, v, _| {
            let mut st = BatchNormState::new(3, 0.1);
            t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Train, 1e-5)
        })),
        ("batch_norm_eval", check_op(0..10, &[&[4, 3, 5], &[3], &[3]], |t, v, _| {
            let mut st = BatchNormState::new(3, 0.1);
            st.running_mean = vec![0.1, -0.2, 0.3];
            st.running_var = vec![0.5, 1.5, 2.0];
            t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval, 1e-5)
        })),
        ("conv_temporal", check_op(0..10, &[&[2, 3, 16], &[4, 3, 6]], |t, v, _| t.conv_temporal(v[0], v[1], Padding::Same))),
        ("conv_temporal_long", check_op(0..10, &[&[2, 2, 24], &[3, 2, 17]], |t, v, _| t.conv_temporal(v[0], v[1], Padding::Same))),
        ("conv_temporal_long_valid", check_op(0..10, &[&[2, 2, 24], &[3, 2, 16]], |t, v, _| t.conv_temporal(v[0], v[1], Padding::Valid))),
        ("depthwise_spatial", check_op(0..10, &[&[2, 4, 3, 5], &[3, 3]], |t, v, _| t.depthwise_conv_spatial(v[0], v[1]))),
        ("mean_pool", check_op(0..10, &[&[3, 4, 5]], |t, v, _| t.mean_pool(v[0], 2))),
        ("segment_mean", check_op(0..10, &[&[6, 3]], |t, v, _| t.segment_mean(v[0], &[0, 0, 1, 1, 1, 2], 3))),
        ("permute", check_op(0..10, &[&[2, 3, 4]], |t, v, _| t.permute(v[0], &[2, 0, 1]))),
        ("mask", check_op(0..10, &[&[4, 6]], |t, v, s| t.mask(v[0], vec![0.0, 1.0, 1.25, (s % 3) as f64], 6))),
        ("cross_entropy", check_op(0..10, &[&[5, 3]], |t, v, _| t.cross_entropy(v[0], &[0, 2, 1, 1, 0], 0.1))),
    ];
    for (name, err) in &cases {
        assert!(*err < 1e-4, "{name}: max relative error {err}");
    }
}

/// Source projections whose columns take both signs and dominate the target
/// projections, so every score pre-activation straddles the LeakyReLU kink
/// across neighbors. When all neighbors share one regime the target gradient
/// is exactly zero and central differences only see rounding noise.
fn straddling_gat_inputs(seed: u64) -> Vec<Tensor> {
    let mut rng = stream(seed, &[0x6A7]);
    let target = Tensor::uniform(&[4, 6], -0.3, 0.3, &mut rng);
    let source = Tensor::from_fn(&[4, 6], |k| {
        let sign = if (k / 6 + k % 6) % 2 == 0 { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.5..1.5)
    });
    let att = Tensor::uniform(&[2, 3], -1.5, 1.5, &mut rng);
    vec![target, source, att]
}

fn full_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (0..n).map(move |j| (j, i))).collect()
}

#[test]
fn gatv2_passes_gradient_check_on_ten_draws() {
    let edges = full_edges(4);
    for seed in 0..10 {
        let report = grad_check(
            |t, v| {
                let y = t.gatv2_attention(v[0], v[1], v[2], &edges, 0.2)?;
                project(t, y, seed)
            },
            &straddling_gat_inputs(seed),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn gatv2_target_gradient_vanishes_in_a_single_leaky_regime() {
    // all pre-activations positive: shifting target_i moves every score of i equally
    let mut rng = stream(3, &[]);
    let target = Tensor::uniform(&[4, 6], 2.0, 3.0, &mut rng);
    let source = Tensor::uniform(&[4, 6], 0.0, 1.0, &mut rng);
    let att = Tensor::uniform(&[2, 3], -1.0, 1.0, &mut rng);
    let edges = full_edges(4);
    let mut tape = Tape::new();
    let (tv, sv, av) = (tape.leaf(target), tape.constant(source), tape.constant(att));
    let y = tape.gatv2_attention(tv, sv, av, &edges, 0.2).unwrap();
    let loss = project(&mut tape, y, 1).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(tv).unwrap().data().iter().all(|g| g.abs() < 1e-14));
}

#[test]
fn softmax_ce_composite_error_below_1e6() {
    let x = rand_tensor(&[4, 3], 23);
    let report = grad_check(
        |t, v| {
            let s = t.softmax(v[0], 1)?;
            t.cross_entropy(s, &[0, 1, 2, 0], 0.1)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn composite_conv_attention_softmax_ce_graph() {
    // conv → per-step scores → softmax over time → pooled → CE
    let inputs = vec![rand_tensor(&[3, 2, 12], 24), rand_tensor(&[4, 2, 5], 25), rand_tensor(&[4, 1], 26), rand_tensor(&[4, 2], 27)];
    let report = grad_check(
        |t, v| {
            let h = t.conv_temporal(v[0], v[1], Padding::Same)?;
            let h = t.permute(h, &[0, 2, 1])?;
            let flat = t.reshape(h, &[36, 4])?;
            let scores = t.matmul(flat, v[2])?;
            let scores = t.reshape(scores, &[3, 1, 12])?;
            let beta = t.softmax(scores, 2)?;
            let pooled = t.batch_matmul(beta, h)?;
            let pooled = t.reshape(pooled, &[3, 4])?;
            let logits = t.matmul(pooled, v[3])?;
            t.cross_entropy(logits, &[1, 0, 1], 0.1)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn checker_detects_corrupted_backward() {
    let x = rand_tensor(&[4, 3], 28);
    let report = grad_check(
        |t, v| {
            t.inject_fault(Some(OpKind::Softmax));
            let s = t.softmax(v[0], 1)?;
            t.cross_entropy(s, &[0, 1, 2, 0], 0.0)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error > 1e-2, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(vals in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(vals.clone()));
        let xs = tape.constant(Tensor::from_vec(vals.iter().map(|v| v + shift).collect()));
        let a = tape.softmax(x, 0).unwrap();
        let b = tape.softmax(xs, 0).unwrap();
        prop_assert!((tape.value(a).sum() - 1.0).abs() < 1e-12);
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
        prop_assert!(tape.value(a).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn same_padding_preserves_time(t_len in 1usize..40, k in 1usize..9, seed in 0u64..1000) {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[1, 2, t_len], seed));
        let w = tape.constant(rand_tensor(&[3, 2, k], seed + 1));
        let y = tape.conv_temporal(x, w, Padding::Same).unwrap();
        prop_assert_eq!(tape.shape(y), &[1, 3, t_len]);
    }

    #[test]
    fn eval_dropout_is_bit_identical(vals in prop::collection::vec(-1e6f64..1e6, 1..64), p in 0.0f64..0.99) {
        let mut tape = Tape::new();
        let mut rng = stream(5, &[]);
        let _: f64 = rng.gen();
        let x = tape.constant(Tensor::from_vec(vals));
        let y = dropout(&mut tape, x, p, DropoutGranularity::Element, Mode::Eval, &mut rng).unwrap();
        prop_assert_eq!(tape.value(y), tape.value(x));
    }
}
