//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Loss changes within this many ulps of the loss are treated as rounding.
pub const RESOLUTION_ULPS: f64 = 8.0;
/// Loss changes smaller than this multiple of the resolution cannot certify a
/// relative error of 1e-4.
const CERTIFIABLE_RATIO: f64 = 1e4;
/// How many times the step may shrink tenfold to keep a stencil off a kink.
const MAX_REFINEMENTS: usize = 3;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub per_input: Vec<f64>,
    pub coordinates_checked: usize,
    /// Coordinates whose stencil crossed a kink at the nominal step and were
    /// re-measured with a smaller one.
    pub refined: usize,
    /// Coordinates whose change in `f` is too small to certify the relative
    /// error but agrees with the prediction to within rounding; excluded from
    /// the error.
    pub below_resolution: usize,
}

/// Compares every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coordinates(&f, inputs, step, &coords)
}

/// Compares up to `per_input` randomly chosen coordinates of each input.
pub fn grad_check_sampled<F, R>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    per_input: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= per_input {
                (0..n).collect()
            } else {
                let mut picked = sample(rng, n, per_input).into_vec();
                picked.sort_unstable();
                picked
            }
        })
        .collect();
    check_coordinates(&f, inputs, step, &coords)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok((value.item(), tape.kink_pattern()))
}

fn check_coordinates<F>(
    f: &F,
    inputs: &[Tensor],
    step: f64,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let kinks = tape.kink_pattern();
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_input: vec![0.0; inputs.len()],
        coordinates_checked: 0,
        refined: 0,
        below_resolution: 0,
    };
    let mut probe = inputs.to_vec();
    for (idx, (var, picked)) in vars.iter().zip(coords).enumerate() {
        let zeros = Tensor::zeros(inputs[idx].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for &c in picked {
            let orig = inputs[idx].data()[c];
            let mut h = step;
            let (plus, minus) = loop {
                probe[idx].data_mut()[c] = orig + h;
                let (plus, kp) = evaluate(f, &probe)?;
                probe[idx].data_mut()[c] = orig - h;
                let (minus, km) = evaluate(f, &probe)?;
                if (kp == kinks && km == kinks) || h <= step * 0.1f64.powi(MAX_REFINEMENTS as i32) {
                    break (plus, minus);
                }
                if h == step {
                    report.refined += 1;
                }
                h *= 0.1;
            };
            probe[idx].data_mut()[c] = orig;
            report.coordinates_checked += 1;
            let a = analytic.data()[c];
            let resolution = RESOLUTION_ULPS * f64::EPSILON * plus.abs().max(minus.abs());
            let (measured, predicted) = (plus - minus, a * 2.0 * h);
            let signal = measured.abs().max(predicted.abs());
            if signal < CERTIFIABLE_RATIO * resolution && (measured - predicted).abs() <= resolution {
                report.below_resolution += 1;
                continue;
            }
            let err = relative_error(a, measured / (2.0 * h));
            if err > report.per_input[idx] {
                report.per_input[idx] = err;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((idx, c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = stream(1, &[]);
        let x = Tensor::uniform(&[6], -2.0, 2.0, &mut rng);
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.coordinates_checked, 6);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn stencil_straddling_a_kink_is_refined() {
        let x = Tensor::from_vec(vec![3e-6, 0.7]);
        let report = grad_check(
            |t, v| {
                let y = t.leaky_relu(v[0], 0.2);
                Ok(t.sum(y))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.refined, 1);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn sub_resolution_changes_are_excluded_only_when_consistent() {
        let x = Tensor::from_vec(vec![0.3]);
        let f = |scale: f64| {
            move |t: &mut Tape, v: &[Var]| {
                let c = t.constant(Tensor::from_vec(vec![1.0]));
                let y = t.scale(v[0], scale);
                let s = t.add(c, y)?;
                Ok(t.sum(s))
            }
        };
        let tiny = grad_check(f(1e-13), std::slice::from_ref(&x), 1e-5).unwrap();
        assert_eq!(tiny.below_resolution, 1);
        assert_eq!(tiny.max_rel_error, 0.0);
        let clear = grad_check(f(1e-3), &[x], 1e-5).unwrap();
        assert_eq!(clear.below_resolution, 0);
        assert!(clear.max_rel_error < 1e-6);
    }
}
