//! Numeric kernels behind the tape ops.
//!
//! Every kernel is a pure function over flat row-major slices. The tape
//! calls these during its forward pass, so any code path that wants
//! tape-identical arithmetic (bit for bit) calls the same functions in
//! the same order.

use crate::scalar::{fp, Scalar};

/// out += a[m×k] · b[k×n], accumulated row by row in k order.
///
/// All three matmul kernels accumulate (`+=`) so the backward pass can add
/// straight into gradient buffers; forward callers pass freshly zeroed
/// output buffers.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in o_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// out += a[m×k] · b[n×k]ᵀ — row-dot-row, the attention-score layout.
pub fn matmul_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// out += a[m×k]ᵀ · b[m×n] — the weight-gradient layout (out is k×n).
pub fn matmul_at<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (j, &a_ij) in a_row.iter().enumerate() {
            let o_row = &mut out[j * n..(j + 1) * n];
            for (o, &b_il) in o_row.iter_mut().zip(b_row) {
                *o += a_ij * b_il;
            }
        }
    }
}

/// out = aᵀ for a[rows×cols].
pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let o = &mut out[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut denom = S::zero();
        for (oi, &xi) in o.iter_mut().zip(row) {
            let e = (xi - max).exp();
            *oi = e;
            denom += e;
        }
        for oi in o.iter_mut() {
            *oi /= denom;
        }
    }
}

/// Row-wise layer normalization followed by the affine (gamma, beta).
/// Also reports per-row mean and inverse stddev for the backward pass.
pub fn layer_norm_rows<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    eps: S,
    rows: usize,
    cols: usize,
    out: &mut [S],
    mean_out: &mut [S],
    inv_std_out: &mut [S],
) {
    let n = fp::<S>(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean /= n;
        let mut var = S::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= n;
        let inv_std = (var + eps).sqrt().recip();
        mean_out[r] = mean;
        inv_std_out[r] = inv_std;
        let o = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            o[c] = (row[c] - mean) * inv_std * gamma[c] + beta[c];
        }
    }
}

/// GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))).
pub fn gelu<S: Scalar>(x: S) -> S {
    let c: S = fp(0.7978845608028654); // sqrt(2/pi)
    let a: S = fp(0.044715);
    let half: S = fp(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (S::one() + u.tanh())
}

/// d/dx of the tanh-approximation GELU.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c: S = fp(0.7978845608028654);
    let a: S = fp(0.044715);
    let half: S = fp(0.5);
    let three: S = fp(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        (S::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// softplus(x) = ln(1 + eˣ), computed as max(x,0) + ln(1 + e^(−|x|)).
pub fn softplus<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (S::one() + (-x.abs()).exp()).ln()
}

/// Normalizes each row to unit L2 norm; returns per-row pre-normalization
/// norms (clamped away from zero) for the backward pass.
pub fn l2_normalize_rows<S: Scalar>(x: &[S], rows: usize, cols: usize, out: &mut [S], norms: &mut [S]) {
    let floor: S = fp(1e-12);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut sq = S::zero();
        for &v in row {
            sq += v * v;
        }
        let norm = sq.sqrt().max(floor);
        norms[r] = norm;
        let o = &mut out[r * cols..(r + 1) * cols];
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = xi / norm;
        }
    }
}

/// Pairwise (tree) summation; better worst-case rounding than a running sum.
pub fn pairwise_sum<S: Scalar>(x: &[S]) -> S {
    match x.len() {
        0 => S::zero(),
        1 => x[0],
        2 => x[0] + x[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
        }
    }
}

/// Cosine of two equal-length vectors that are already unit norm.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}
