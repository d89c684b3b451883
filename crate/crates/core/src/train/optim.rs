//! AdamW with decoupled weight decay.

use indexmap::IndexMap;

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
    pub t: u64,
}

/// One update of every parameter that has a gradient. Parameters without a
/// gradient still receive weight decay.
///
/// All gradients are validated before anything is modified, so a failed step
/// leaves `params` and `state` untouched.
pub fn adamw_step(
    params: &mut IndexMap<String, Tensor>,
    grads: &IndexMap<String, Tensor>,
    state: &mut AdamWState,
    lr: f64,
    opt: &AdamW,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::Optimizer {
            name: name.clone(),
            reason: "gradient for an unknown parameter".into(),
        })?;
        if g.shape() != p.shape() {
            return Err(Error::Optimizer {
                name: name.clone(),
                reason: format!("gradient shape {:?} differs from parameter shape {:?}", g.shape(), p.shape()),
            });
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Optimizer {
                name: name.clone(),
                reason: format!("non-finite gradient {} at index {i}", g.data()[i]),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let decay = lr * opt.weight_decay;
        let Some(g) = grads.get(name) else {
            p.data_mut().iter_mut().for_each(|w| *w -= decay * *w);
            continue;
        };
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + opt.eps);
            *w -= lr * update + decay * *w;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt() -> AdamW {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3 }
    }

    fn single(w: f64) -> IndexMap<String, Tensor> {
        IndexMap::from([("w".to_string(), Tensor::from_vec(vec![w]))])
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut p = single(2.0);
        adamw_step(&mut p, &single(0.0), &mut AdamWState::default(), 3e-4, &opt()).unwrap();
        assert!((p["w"].data()[0] - 2.0 * (1.0 - 3e-7)).abs() < 1e-15);
    }

    #[test]
    fn first_step_hand_value() {
        // m̂ = g, v̂ = g², so the Adam term is lr·sign(g)
        let mut p = single(1.0);
        let mut st = AdamWState::default();
        adamw_step(&mut p, &single(0.5), &mut st, 3e-4, &opt()).unwrap();
        assert!((p["w"].data()[0] - 0.9996997).abs() < 1e-10);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut p = single(1.0);
        let mut st = AdamWState::default();
        let err = adamw_step(&mut p, &single(f64::NAN), &mut st, 3e-4, &opt()).unwrap_err();
        assert!(matches!(&err, Error::Optimizer { name, .. } if name == "w"));
        assert_eq!(p["w"].data()[0], 1.0);
        assert_eq!(st.t, 0);
    }
}
