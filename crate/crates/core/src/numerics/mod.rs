//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference checker.

pub mod gradcheck;
pub(crate) mod kernels;
mod spectral;
pub mod rng;
pub mod tape;
pub mod tensor;

use rand::Rng;

pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport};
pub use rng::{stream, OpRng, StreamRng};
pub use tape::{Activation, BatchNormState, Gradients, Mode, OpKind, Padding, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tape::{smoothed_ce_forward, smoothed_ce_grad};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutGranularity {
    /// Independent mask per element.
    Element,
    /// One mask per `(axis 0, axis 1)` entry, shared over the trailing axes.
    Channel,
}

/// Inverted dropout: survivors scaled by `1 / (1 - p)`; identity in eval mode.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    granularity: DropoutGranularity,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout probability must lie in [0, 1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let group = match granularity {
        DropoutGranularity::Element => 1,
        DropoutGranularity::Channel => shape.iter().skip(2).product(),
    };
    let groups = shape.iter().product::<usize>() / group;
    let keep = 1.0 / (1.0 - p);
    let mask = (0..groups)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask(x, mask, group)
}
