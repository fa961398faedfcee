//! Raw numeric kernels shared by the autodiff graph and analysis code.
//!
//! Every kernel runs on one thread with a fixed accumulation order. The dot
//! product uses eight independent lanes folded in a fixed tree, which lets
//! the compiler vectorize the loop without changing the result between runs.

use super::Real;

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C1: f64 = 0.044_715;

/// Dot product with a fixed eight-lane reduction tree.
pub fn dot<E: Real>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [E::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let off = c * 8;
        for l in 0..8 {
            lanes[l] += a[off + l] * b[off + l];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `out[m,n] = a[m,k] * b[k,n]`, accumulating over `k` in order.
pub fn mm_nn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(E::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m,n] = a[m,k] * b[n,k]^T` via row-by-row dot products.
pub fn mm_nt<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let row = &mut out[i * n..(i + 1) * n];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k,n] = a[m,k]^T * b[m,n]`, accumulating over `m` in order.
pub fn mm_tn<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.fill(E::zero());
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// In-place row softmax over a `rows x cols` matrix.
pub fn softmax_rows<E: Real>(x: &mut [E], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    for r in 0..rows {
        softmax_slice(&mut x[r * cols..(r + 1) * cols]);
    }
}

/// In-place causally masked row softmax over a square `t x t` matrix.
///
/// Row `q` normalizes over columns `0..=q`; entries above the diagonal are
/// exactly zero.
pub fn softmax_causal<E: Real>(x: &mut [E], t: usize) {
    debug_assert_eq!(x.len(), t * t);
    for q in 0..t {
        let row = &mut x[q * t..(q + 1) * t];
        softmax_slice(&mut row[..=q]);
        for v in &mut row[q + 1..] {
            *v = E::zero();
        }
    }
}

/// In-place softmax of one slice with max subtraction for stability.
pub fn softmax_slice<E: Real>(v: &mut [E]) {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = E::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = E::one() / sum;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `log(sum(exp(v)))` with max subtraction.
pub fn logsumexp<E: Real>(v: &[E]) -> E {
    let mut max = v[0];
    for &x in v.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = E::zero();
    for &x in v.iter() {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// Logistic sigmoid.
pub fn sigmoid<E: Real>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

/// GELU activation, tanh approximation.
pub fn gelu<E: Real>(x: E) -> E {
    let c0 = E::from_f64(GELU_C0);
    let c1 = E::from_f64(GELU_C1);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c0 * (x + c1 * x * x * x)).tanh())
}

/// Derivative of the tanh-approximated GELU.
pub fn gelu_grad<E: Real>(x: E) -> E {
    let c0 = E::from_f64(GELU_C0);
    let c1 = E::from_f64(GELU_C1);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let du = c0 * (E::one() + three * c1 * x * x);
    half * (E::one() + t) + half * x * (E::one() - t * t) * du
}

/// Mean and reciprocal standard deviation of one row for layer norm.
pub fn row_moments<E: Real>(row: &[E], eps: E) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mut mean = E::zero();
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = E::zero();
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var / n;
    (mean, E::one() / (var + eps).sqrt())
}
