//! Raw slice kernels shared by the forward and backward passes.

/// `out[t] += Σ_j w[j] · xp[t + j]` for every `t < out.len()`.
///
/// `xp` must hold at least `out.len() + w.len() - 1` values. The same kernel
/// computes forward correlation, input gradients (with a flipped kernel) and
/// kernel gradients (with the output gradient as the "kernel").
pub(crate) fn correlate_accum(out: &mut [f64], xp: &[f64], w: &[f64]) {
    const LANES: usize = 8;
    let n = out.len();
    let k = w.len();
    debug_assert!(xp.len() + 1 >= n + k);
    let mut t = 0;
    while t + LANES <= n {
        let mut acc = [0.0f64; LANES];
        for (j, &wj) in w.iter().enumerate() {
            let xs = &xp[t + j..t + j + LANES];
            for u in 0..LANES {
                acc[u] += wj * xs[u];
            }
        }
        for u in 0..LANES {
            out[t + u] += acc[u];
        }
        t += LANES;
    }
    while t < n {
        let mut acc = 0.0;
        for (j, &wj) in w.iter().enumerate() {
            acc += wj * xp[t + j];
        }
        out[t] += acc;
        t += 1;
    }
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 4;
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for u in 0..LANES {
            acc[u] += x[u] * y[u];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Row-major `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for l in 0..k {
            let ail = a[i * k + l];
            if ail != 0.0 {
                axpy(crow, ail, &b[l * n..(l + 1) * n]);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for l in 0..k {
        let brow = &b[l * n..(l + 1) * n];
        for i in 0..m {
            let ali = a[l * m + i];
            if ali != 0.0 {
                axpy(&mut c[i * n..(i + 1) * n], ali, brow);
            }
        }
    }
}
