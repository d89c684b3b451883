use indexmap::IndexMap;

use super::config::{ModelConfig, ENCODER_KERNELS};
use crate::error::{Error, Result};
use crate::numerics::{stream, BatchNormState, Tape, Tensor, Var};

/// Shapes of every learnable tensor implied by a config, in canonical order.
pub fn param_shapes(cfg: &ModelConfig) -> IndexMap<String, Vec<usize>> {
    let mut s = IndexMap::new();
    let mut fin = 1;
    for (i, (&f, &k)) in cfg.encoder_features.iter().zip(&ENCODER_KERNELS).enumerate() {
        let n = i + 1;
        s.insert(format!("encoder.conv{n}.weight"), vec![f, fin, k]);
        s.insert(format!("encoder.bn{n}.gamma"), vec![f]);
        s.insert(format!("encoder.bn{n}.beta"), vec![f]);
        s.insert(format!("encoder.prelu{n}"), vec![1]);
        fin = f;
    }
    s.insert("encoder.spatial.weight".into(), vec![fin, cfg.spatial_kernel]);
    if cfg.enable_temporal_attention {
        s.insert("attention.q".into(), vec![fin]);
    }
    let layers = [
        ("gat1", fin, cfg.gat_heads, cfg.gat_head_dim, cfg.gat1_dim()),
        ("gat2", cfg.gat1_dim(), 1, cfg.gat2_dim, cfg.gat2_dim),
    ];
    for (name, din, heads, fh, dout) in layers {
        s.insert(format!("{name}.w_l"), vec![din, heads * fh]);
        s.insert(format!("{name}.w_r"), vec![din, heads * fh]);
        s.insert(format!("{name}.att"), vec![heads, fh]);
        s.insert(format!("{name}.ln.gamma"), vec![dout]);
        s.insert(format!("{name}.ln.beta"), vec![dout]);
        s.insert(format!("{name}.prelu"), vec![1]);
    }
    s.insert("head.fc1.weight".into(), vec![cfg.gat2_dim, cfg.classifier_hidden]);
    s.insert("head.fc1.bias".into(), vec![cfg.classifier_hidden]);
    s.insert("head.fc2.weight".into(), vec![cfg.classifier_hidden, cfg.n_classes]);
    s.insert("head.fc2.bias".into(), vec![cfg.n_classes]);
    s
}

/// Learnable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: IndexMap<String, Tensor>,
    /// One state per encoder stage.
    pub batch_norm: Vec<BatchNormState>,
}

impl ModelParams {
    /// Fan-in uniform init for weights, zeros for biases and shifts, ones for
    /// normalization gains, 0.25 for PReLU slopes and `±0.1` for the query.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[0x1D17]);
        let tensors = param_shapes(config)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".bias") || name.ends_with(".beta") {
                    Tensor::zeros(&shape)
                } else if name.ends_with(".gamma") {
                    Tensor::ones(&shape)
                } else if name.contains("prelu") {
                    Tensor::full(&shape, 0.25)
                } else if name == "attention.q" {
                    Tensor::uniform(&shape, -0.1, 0.1, &mut rng)
                } else {
                    let fan_in: usize = match shape.len() {
                        3 => shape[1] * shape[2],
                        _ if name.ends_with(".att") || name == "encoder.spatial.weight" => shape[1],
                        _ => shape[0],
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Tensor::uniform(&shape, -bound, bound, &mut rng)
                };
                (name, t)
            })
            .collect();
        let batch_norm = config
            .encoder_features
            .iter()
            .map(|&f| BatchNormState::new(f, config.batch_norm_momentum))
            .collect();
        Ok(Self { config: config.clone(), tensors, batch_norm })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("model has no parameter `{name}`")))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.tensors.iter().map(|(k, t)| (k.clone(), tape.leaf(t.clone()))).collect(),
        }
    }

    /// Checks that every tensor has the shape the config implies.
    pub fn check_shapes(&self) -> Result<()> {
        let expected = param_shapes(&self.config);
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Config(format!("parameter `{name}` is missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(name) = self.tensors.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter `{name}`")));
        }
        if self.batch_norm.len() != 3
            || self
                .batch_norm
                .iter()
                .zip(&self.config.encoder_features)
                .any(|(s, &f)| s.running_mean.len() != f || s.running_var.len() != f)
        {
            return Err(Error::Config("batch-norm statistics do not match encoder_features".into()));
        }
        Ok(())
    }
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Binds parameter tensors already on the tape, paired with names in
    /// canonical order.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Self { vars: names.into_iter().zip(vars.iter().copied()).collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn maybe(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}
