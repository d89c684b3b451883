//! Finite-difference gradient checks of every op and of the full model.

use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{batch_graphs, full_edges, EEGGraph, GraphBatch};
use crate::model::{model_forward, BoundParams, ModelConfig, ModelParams};
use crate::numerics::{
    grad_check, grad_check_sampled, stream, BatchNormState, Mode, OpKind, OpRng, Padding, Tape,
    Tensor, Var,
};

/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.5, 1.5, &mut stream(seed, &[0xC4EC]))
}

fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(tape.shape(y), seed ^ 0x5151));
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Target/source projections whose scores straddle the LeakyReLU kink across
/// neighbors, so no attention gradient is identically zero.
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

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    let shapes = |s: &[&[usize]]| s.iter().map(|x| x.to_vec()).collect::<Vec<_>>();
    vec![
        ("matmul", shapes(&[&[3, 4], &[4, 2]]), Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("batch_matmul", shapes(&[&[2, 3, 4], &[2, 4, 2]]), Box::new(|t, v| t.batch_matmul(v[0], v[1]))),
        ("add", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_bias", shapes(&[&[3, 4], &[4]]), Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("mul", shapes(&[&[3, 4], &[3, 4]]), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", shapes(&[&[5]]), Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("reshape", shapes(&[&[2, 6]]), Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("permute", shapes(&[&[2, 3, 4]]), Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("softmax", shapes(&[&[3, 4, 2]]), Box::new(|t, v| t.softmax(v[0], 1))),
        ("elu", shapes(&[&[12]]), Box::new(|t, v| Ok(t.elu(v[0], 1.0)))),
        ("leaky_relu", shapes(&[&[12]]), Box::new(|t, v| Ok(t.leaky_relu(v[0], 0.2)))),
        ("prelu", shapes(&[&[2, 3, 4], &[3]]), Box::new(|t, v| t.prelu(v[0], v[1], 1))),
        ("layer_norm", shapes(&[&[3, 6], &[6], &[6]]), Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        (
            "batch_norm_train",
            shapes(&[&[4, 3, 5], &[3], &[3]]),
            Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], &mut BatchNormState::new(3, 0.1), Mode::Train, 1e-5)),
        ),
        (
            "batch_norm_eval",
            shapes(&[&[4, 3, 5], &[3], &[3]]),
            Box::new(|t, v| {
                let mut st = BatchNormState::new(3, 0.1);
                st.running_mean = vec![0.1, -0.2, 0.3];
                st.running_var = vec![0.5, 1.5, 2.0];
                t.batch_norm(v[0], v[1], v[2], &mut st, Mode::Eval, 1e-5)
            }),
        ),
        (
            "conv_temporal_direct",
            shapes(&[&[2, 3, 16], &[4, 3, 6]]),
            Box::new(|t, v| t.conv_temporal(v[0], v[1], Padding::Same)),
        ),
        (
            "conv_temporal_spectral",
            shapes(&[&[2, 2, 40], &[3, 2, 32]]),
            Box::new(|t, v| t.conv_temporal(v[0], v[1], Padding::Same)),
        ),
        (
            "depthwise_spatial",
            shapes(&[&[2, 4, 3, 5], &[3, 3]]),
            Box::new(|t, v| t.depthwise_conv_spatial(v[0], v[1])),
        ),
        ("mask", shapes(&[&[4, 6]]), Box::new(|t, v| t.mask(v[0], vec![0.0, 1.0, 1.25, 2.0], 6))),
        ("mean_pool", shapes(&[&[3, 4, 5]]), Box::new(|t, v| t.mean_pool(v[0], 2))),
        (
            "segment_mean",
            shapes(&[&[6, 3]]),
            Box::new(|t, v| t.segment_mean(v[0], &[0, 0, 1, 1, 1, 2], 3)),
        ),
        ("cross_entropy", shapes(&[&[5, 3]]), Box::new(|t, v| t.cross_entropy(v[0], &[0, 2, 1, 1, 0], 0.1))),
    ]
}

/// Checks every op on `draws` random inputs each. `fault` corrupts one
/// backward rule to demonstrate detection.
pub fn op_suite(fault: Option<OpKind>, draws: u64) -> Result<Vec<CheckEntry>> {
    let mut out = Vec::new();
    for (name, shapes, op) in op_cases() {
        let mut entry = CheckEntry { name: name.to_string(), max_rel_error: 0.0, coordinates: 0 };
        for seed in 0..draws {
            let inputs: Vec<Tensor> =
                shapes.iter().enumerate().map(|(i, s)| rand_tensor(s, seed * 31 + i as u64)).collect();
            let report = grad_check(
                |t, v| {
                    t.inject_fault(fault);
                    let y = op(t, v)?;
                    project(t, y, seed)
                },
                &inputs,
                STEP,
            )?;
            entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
            entry.coordinates += report.coordinates_checked;
        }
        out.push(entry);
    }
    let edges = full_edges(4);
    let mut entry = CheckEntry { name: "gatv2".into(), max_rel_error: 0.0, coordinates: 0 };
    for seed in 0..draws {
        let report = grad_check(
            |t, v| {
                t.inject_fault(fault);
                let y = t.gatv2_attention(v[0], v[1], v[2], &edges, 0.2)?;
                project(t, y, seed)
            },
            &straddling_gat_inputs(seed),
            STEP,
        )?;
        entry.max_rel_error = entry.max_rel_error.max(report.max_rel_error);
        entry.coordinates += report.coordinates_checked;
    }
    out.push(entry);
    Ok(out)
}

/// A batch of `b` random graphs on `c` channels. Channels differ in scale and
/// offset so node embeddings are heterogeneous.
pub fn random_batch(c: usize, b: usize, input_len: usize, seed: u64) -> Result<GraphBatch> {
    let mut rng = stream(seed, &[0xBA7C]);
    let graphs: Vec<EEGGraph> = (0..b)
        .map(|g| EEGGraph {
            node_features: (0..c)
                .map(|_| {
                    let scale = rng.gen_range(0.2..5.0);
                    let offset = rng.gen_range(-3.0..3.0);
                    (0..input_len).map(|_| offset + scale * rng.gen_range(-1.0..1.0)).collect()
                })
                .collect(),
            edges: full_edges(c),
            label: g % 2,
            trial_id: g as u64,
            subject_id: 0,
        })
        .collect();
    batch_graphs(&graphs)
}

/// Checks the label-smoothed loss of a train-mode forward pass against every
/// parameter group, sampling up to `per_group` coordinates of each.
pub fn model_suite(
    cfg: &ModelConfig,
    batch: &GraphBatch,
    fault: Option<OpKind>,
    seed: u64,
    per_group: usize,
) -> Result<Vec<CheckEntry>> {
    let params = ModelParams::init(cfg, seed)?;
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();
    let report = grad_check_sampled(
        |t, v| {
            t.inject_fault(fault);
            let bound = BoundParams::from_vars(names.iter().cloned(), v);
            let mut bn = params.batch_norm.clone();
            let mut rng = OpRng::new(seed, &[0xF0D]);
            let out = model_forward(t, batch, cfg, &bound, &mut bn, Mode::Train, &mut rng)?;
            t.cross_entropy(out.logits, &batch.labels, 0.1)
        },
        &inputs,
        STEP,
        per_group,
        &mut stream(seed, &[0x5A3]),
    )?;
    Ok(names
        .iter()
        .zip(&inputs)
        .zip(&report.per_input)
        .map(|((name, t), &err)| CheckEntry {
            name: format!("model/{name}"),
            max_rel_error: err,
            coordinates: t.numel().min(per_group),
        })
        .collect())
}
