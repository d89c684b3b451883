//! Frequency-domain evaluation of long temporal convolutions.
//!
//! Rows are zero-padded to an even 5-smooth length long enough that every
//! lag actually read back from the circular products is alias-free.

use std::cell::RefCell;
use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};

type C64 = Complex<f64>;

/// Kernels at least this long are convolved through the FFT.
pub(crate) const MIN_KERNEL: usize = 16;

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

struct Fft {
    len: usize,
    fwd: Arc<dyn RealToComplex<f64>>,
    inv: Arc<dyn ComplexToReal<f64>>,
    real: Vec<f64>,
    spec: Vec<C64>,
    scratch: Vec<C64>,
}

/// Spectra are stored split: `bins` real parts followed by `bins` imaginary
/// parts per row.
impl Fft {
    fn new(len: usize) -> Self {
        let (fwd, inv) = PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            (p.plan_fft_forward(len), p.plan_fft_inverse(len))
        });
        let scratch = vec![C64::default(); fwd.get_scratch_len().max(inv.get_scratch_len())];
        Self { len, fwd, inv, real: vec![0.0; len], spec: vec![C64::default(); len / 2 + 1], scratch }
    }

    fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    fn forward(&mut self, x: &[f64], out: &mut [f64]) {
        self.real[..x.len()].copy_from_slice(x);
        self.real[x.len()..].fill(0.0);
        self.fwd
            .process_with_scratch(&mut self.real, &mut self.spec, &mut self.scratch)
            .expect("forward FFT buffers sized by plan");
        let (re, im) = out.split_at_mut(self.spec.len());
        for ((r, i), c) in re.iter_mut().zip(im).zip(&self.spec) {
            *r = c.re;
            *i = c.im;
        }
    }

    /// Inverse transform of a split spectrum, scaled to invert [`Fft::forward`].
    fn inverse(&mut self, spec: &[f64]) -> &[f64] {
        let (re, im) = spec.split_at(self.spec.len());
        for ((c, &r), &i) in self.spec.iter_mut().zip(re).zip(im) {
            *c = C64::new(r, i);
        }
        let last = self.spec.len() - 1;
        self.spec[0].im = 0.0;
        self.spec[last].im = 0.0;
        self.inv
            .process_with_scratch(&mut self.spec, &mut self.real, &mut self.scratch)
            .expect("inverse FFT buffers sized by plan");
        let scale = 1.0 / self.len as f64;
        self.real.iter_mut().for_each(|v| *v *= scale);
        &self.real
    }

    fn transform_rows(&mut self, data: &[f64], row: usize) -> Vec<f64> {
        let stride = 2 * self.bins();
        let rows = data.len() / row;
        let mut out = vec![0.0; rows * stride];
        for r in 0..rows {
            self.forward(&data[r * row..(r + 1) * row], &mut out[r * stride..(r + 1) * stride]);
        }
        out
    }
}

/// Shape of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub t_in: usize,
    pub cout: usize,
    pub k: usize,
    pub pad_left: usize,
    pub t_out: usize,
}

impl ConvDims {
    /// Forward, input-gradient and kernel-gradient products all read lags
    /// in `[-pad_left, t_out + k - 1 - pad_left)` against a row of length
    /// `t_in`, which is alias-free once both bounds below hold.
    fn fft_len(&self) -> usize {
        let need = (self.t_in + self.pad_left).max((self.t_out + self.k).saturating_sub(1 + self.pad_left));
        smooth_len(need.max(2))
    }
}

/// Smallest even `n >= m` with no prime factor above 5.
fn smooth_len(m: usize) -> usize {
    let mut n = m + m % 2;
    loop {
        let mut r = n;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return n;
        }
        n += 2;
    }
}

/// Input and kernel spectra kept for the backward pass.
pub(crate) struct Spectra {
    x: Vec<f64>,
    w: Vec<f64>,
}

/// `acc += a · b` (or `a · conj(b)`) on split spectra.
#[inline]
fn mac(acc: &mut [f64], a: &[f64], b: &[f64], conj_b: bool) {
    let n = acc.len() / 2;
    let (sr, si) = acc.split_at_mut(n);
    let (ar, ai) = a.split_at(n);
    let (br, bi) = b.split_at(n);
    let (ar, ai, br, bi, si) = (&ar[..n], &ai[..n], &br[..n], &bi[..n], &mut si[..n]);
    let sign = if conj_b { -1.0 } else { 1.0 };
    for k in 0..n {
        let bik = sign * bi[k];
        sr[k] += ar[k] * br[k] - ai[k] * bik;
        si[k] += ai[k] * br[k] + ar[k] * bik;
    }
}

/// `out[s, o, t] = Σ_i Σ_j w[o, i, j] · x[s, i, t + j - pad_left]`.
pub(crate) fn forward(x: &[f64], w: &[f64], d: ConvDims) -> (Vec<f64>, Spectra) {
    let len = d.fft_len();
    let mut fft = Fft::new(len);
    let st = 2 * fft.bins();
    let xs = fft.transform_rows(x, d.t_in);
    let ws = fft.transform_rows(w, d.k);
    let mut out = vec![0.0; d.n * d.cout * d.t_out];
    let mut acc = vec![0.0; st];
    for s in 0..d.n {
        for o in 0..d.cout {
            acc.fill(0.0);
            for i in 0..d.cin {
                let xr = &xs[(s * d.cin + i) * st..(s * d.cin + i + 1) * st];
                let wr = &ws[(o * d.cin + i) * st..(o * d.cin + i + 1) * st];
                mac(&mut acc, xr, wr, true);
            }
            let r = fft.inverse(&acc);
            let row = &mut out[(s * d.cout + o) * d.t_out..(s * d.cout + o + 1) * d.t_out];
            for (t, v) in row.iter_mut().enumerate() {
                *v = r[(t + len - d.pad_left) % len];
            }
        }
    }
    (out, Spectra { x: xs, w: ws })
}

/// Input and kernel gradients given the output gradient `g`.
pub(crate) fn backward(
    g: &[f64],
    sp: &Spectra,
    d: ConvDims,
    want_x: bool,
    want_w: bool,
) -> (Vec<f64>, Vec<f64>) {
    let len = d.fft_len();
    let mut fft = Fft::new(len);
    let st = 2 * fft.bins();
    let gs = fft.transform_rows(g, d.t_out);
    let mut dx = Vec::new();
    if want_x {
        dx = vec![0.0; d.n * d.cin * d.t_in];
        let mut acc = vec![0.0; st];
        for s in 0..d.n {
            for i in 0..d.cin {
                acc.fill(0.0);
                for o in 0..d.cout {
                    let gr = &gs[(s * d.cout + o) * st..(s * d.cout + o + 1) * st];
                    let wr = &sp.w[(o * d.cin + i) * st..(o * d.cin + i + 1) * st];
                    mac(&mut acc, gr, wr, false);
                }
                let r = fft.inverse(&acc);
                let row = &mut dx[(s * d.cin + i) * d.t_in..(s * d.cin + i + 1) * d.t_in];
                for (u, v) in row.iter_mut().enumerate() {
                    *v = r[(u + d.pad_left) % len];
                }
            }
        }
    }
    let mut dw = Vec::new();
    if want_w {
        let mut acc = vec![0.0; d.cout * d.cin * st];
        for s in 0..d.n {
            for o in 0..d.cout {
                let gr = &gs[(s * d.cout + o) * st..(s * d.cout + o + 1) * st];
                for i in 0..d.cin {
                    let xr = &sp.x[(s * d.cin + i) * st..(s * d.cin + i + 1) * st];
                    mac(&mut acc[(o * d.cin + i) * st..(o * d.cin + i + 1) * st], xr, gr, true);
                }
            }
        }
        dw = vec![0.0; d.cout * d.cin * d.k];
        for (p, row) in dw.chunks_exact_mut(d.k).enumerate() {
            let r = fft.inverse(&acc[p * st..(p + 1) * st]);
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[(j + len - d.pad_left) % len];
            }
        }
    }
    (dx, dw)
}
