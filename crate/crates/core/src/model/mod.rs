//! The temporally augmented GATv2 classifier.
//!
//! Per node: a three-stage temporal convolution encoder and a depthwise
//! spatial convolution produce a `[L, F]` feature map, which is mean-pooled
//! into `T_seg` chunks. Temporal dropout masks whole chunks, temporal
//! attention pools them into one vector per node, two GATv2 layers mix
//! information across channels, and a pooled readout yields class logits.

pub mod checkpoint;
pub mod config;
pub mod params;

use rand::Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{Ablation, ModelConfig, ENCODER_KERNELS};
pub use params::{param_shapes, BoundParams, ModelParams};

use crate::error::{Error, Result};
use crate::graph::GraphBatch;
use crate::numerics::{
    dropout, BatchNormState, DropoutGranularity, Mode, OpRng, Padding, Tape, Tensor, Var,
};

/// Runs the convolution stages on `[N, 1, L]` node signals and returns the
/// chunk sequence `[N, T_seg, F₃]`.
#[allow(clippy::too_many_arguments)]
pub fn temporal_encoder(
    tape: &mut Tape,
    x: Var,
    n_graphs: usize,
    cfg: &ModelConfig,
    p: &BoundParams,
    bn: &mut [BatchNormState],
    mode: Mode,
    rng: &mut OpRng,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != 1 || shape[2] != cfg.input_len {
        return Err(Error::Shape(format!(
            "encoder expects [N, 1, {}] node signals, got {shape:?}",
            cfg.input_len
        )));
    }
    let n = shape[0];
    if n_graphs == 0 || !n.is_multiple_of(n_graphs) {
        return Err(Error::Shape(format!("{n} nodes cannot be split into {n_graphs} graphs")));
    }
    let mut h = x;
    for (i, state) in bn.iter_mut().enumerate().take(3) {
        let s = i + 1;
        h = tape.conv_temporal(h, p.get(&format!("encoder.conv{s}.weight"))?, Padding::Same)?;
        let (g, b) = (p.get(&format!("encoder.bn{s}.gamma"))?, p.get(&format!("encoder.bn{s}.beta"))?);
        h = tape.batch_norm(h, g, b, state, mode, cfg.norm_eps)?;
        h = tape.prelu(h, p.get(&format!("encoder.prelu{s}"))?, 1)?;
        h = dropout(tape, h, cfg.spatial_dropout, DropoutGranularity::Channel, mode, &mut rng.next_stream())?;
    }
    let f = cfg.encoder_dim();
    let l = cfg.input_len;
    let c = n / n_graphs;
    h = tape.reshape(h, &[n_graphs, c, f, l])?;
    h = tape.depthwise_conv_spatial(h, p.get("encoder.spatial.weight")?)?;
    let t = cfg.temporal_segments;
    h = tape.reshape(h, &[n, f, t, l / t])?;
    h = tape.mean_pool(h, 3)?;
    tape.permute(h, &[0, 2, 1])
}

/// Zeroes each `(node, chunk)` feature vector of `[N, T, F]` with
/// probability `p` in train mode.
pub fn temporal_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    z: Var,
    p: f64,
    rescale: bool,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("temporal dropout probability must lie in [0, 1), got {p}")));
    }
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("temporal dropout expects [N, T, F], got {shape:?}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(z);
    }
    let keep = if rescale { 1.0 / (1.0 - p) } else { 1.0 };
    let mask = (0..shape[0] * shape[1])
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask(z, mask, shape[2])
}

/// Softmax-weighted pooling over chunks of `[N, T, F]`.
///
/// Returns the weights `β` (`[N, T]`) and the pooled `[N, F]` features. With
/// no query the chunks are averaged and no weights are returned.
pub fn temporal_attention(tape: &mut Tape, z: Var, q: Option<Var>) -> Result<(Option<Var>, Var)> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("temporal attention expects [N, T, F], got {shape:?}")));
    }
    let (n, t, f) = (shape[0], shape[1], shape[2]);
    let Some(q) = q else {
        return Ok((None, tape.mean_pool(z, 1)?));
    };
    if tape.shape(q) != [f] {
        return Err(Error::Shape(format!("query {:?} does not match feature dim {f}", tape.shape(q))));
    }
    let flat = tape.reshape(z, &[n * t, f])?;
    let qc = tape.reshape(q, &[f, 1])?;
    let scores = tape.matmul(flat, qc)?;
    let scores = tape.reshape(scores, &[n, t])?;
    let beta = tape.softmax(scores, 1)?;
    let b3 = tape.reshape(beta, &[n, 1, t])?;
    let pooled = tape.batch_matmul(b3, z)?;
    let pooled = tape.reshape(pooled, &[n, f])?;
    Ok((Some(beta), pooled))
}

#[derive(Clone, Copy, Debug)]
pub struct GatSpec {
    pub heads: usize,
    pub concat: bool,
    pub negative_slope: f64,
    pub eps: f64,
}

/// Output of one GATv2 layer.
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    pub out: Var,
    /// The attention op node; see [`Tape::attention_weights`].
    pub attention: Var,
}

/// GATv2 attention, head merge, layer norm and PReLU, with parameters
/// `<prefix>.{w_l, w_r, att, ln.gamma, ln.beta, prelu}`.
pub fn gatv2_layer(
    tape: &mut Tape,
    h: Var,
    edges: &[(usize, usize)],
    p: &BoundParams,
    prefix: &str,
    spec: GatSpec,
) -> Result<GatOutput> {
    let get = |name: &str| p.get(&format!("{prefix}.{name}"));
    let target = tape.matmul(h, get("w_l")?)?;
    let source = tape.matmul(h, get("w_r")?)?;
    let attention = tape.gatv2_attention(target, source, get("att")?, edges, spec.negative_slope)?;
    let mut out = attention;
    if !spec.concat && spec.heads > 1 {
        let n = tape.shape(out)[0];
        let width = tape.shape(out)[1];
        out = tape.reshape(out, &[n, spec.heads, width / spec.heads])?;
        out = tape.mean_pool(out, 1)?;
    }
    out = tape.layer_norm(out, get("ln.gamma")?, get("ln.beta")?, spec.eps)?;
    out = tape.prelu(out, get("prelu")?, 1)?;
    Ok(GatOutput { out, attention })
}

/// Per-graph mean of node features followed by the two-layer classifier.
#[allow(clippy::too_many_arguments)]
pub fn readout_classify(
    tape: &mut Tape,
    h: Var,
    membership: &[usize],
    n_graphs: usize,
    p: &BoundParams,
    dropout_p: f64,
    mode: Mode,
    rng: &mut OpRng,
) -> Result<Var> {
    let pooled = tape.segment_mean(h, membership, n_graphs)?;
    let x = tape.matmul(pooled, p.get("head.fc1.weight")?)?;
    let x = tape.add_bias(x, p.get("head.fc1.bias")?)?;
    let x = tape.elu(x, 1.0);
    let x = dropout(tape, x, dropout_p, DropoutGranularity::Element, mode, &mut rng.next_stream())?;
    let x = tape.matmul(x, p.get("head.fc2.weight")?)?;
    tape.add_bias(x, p.get("head.fc2.bias")?)
}

/// Handles to the interesting intermediate nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Temporal attention weights `[N, T_seg]`, if attention is enabled.
    pub beta: Option<Var>,
    /// Per-node pooled temporal features `[N, F₃]`.
    pub node_features: Var,
    pub gat: [GatOutput; 2],
}

/// Full forward pass on a batch of graphs.
pub fn model_forward(
    tape: &mut Tape,
    batch: &GraphBatch,
    cfg: &ModelConfig,
    p: &BoundParams,
    bn: &mut [BatchNormState],
    mode: Mode,
    rng: &mut OpRng,
) -> Result<ForwardOutput> {
    let n = batch.n_nodes();
    let x = Tensor::new(vec![n, 1, batch.feature_len], batch.features.clone())?;
    let x = tape.constant(x);
    let z = temporal_encoder(tape, x, batch.n_graphs(), cfg, p, bn, mode, rng)?;
    let z = if cfg.enable_temporal_dropout {
        let mut r = rng.next_stream();
        temporal_dropout(tape, z, cfg.temporal_dropout_p, cfg.rescale_temporal_dropout, mode, &mut r)?
    } else {
        z
    };
    let q = if cfg.enable_temporal_attention { Some(p.get("attention.q")?) } else { None };
    let (beta, node_features) = temporal_attention(tape, z, q)?;
    let spec1 = GatSpec {
        heads: cfg.gat_heads,
        concat: cfg.gat_concat,
        negative_slope: cfg.gat_negative_slope,
        eps: cfg.norm_eps,
    };
    let spec2 = GatSpec { heads: 1, concat: true, ..spec1 };
    let g1 = gatv2_layer(tape, node_features, &batch.edges, p, "gat1", spec1)?;
    let g2 = gatv2_layer(tape, g1.out, &batch.edges, p, "gat2", spec2)?;
    let logits = readout_classify(
        tape,
        g2.out,
        &batch.membership,
        batch.n_graphs(),
        p,
        cfg.classifier_dropout,
        mode,
        rng,
    )?;
    Ok(ForwardOutput { logits, beta, node_features, gat: [g1, g2] })
}

impl ModelParams {
    /// Eval-mode logits `[B, K]`.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut bn = self.batch_norm.clone();
        let mut rng = OpRng::new(0, &[]);
        let out = model_forward(&mut tape, batch, &self.config, &bound, &mut bn, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.logits).clone())
    }
}
