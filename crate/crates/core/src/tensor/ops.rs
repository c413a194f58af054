//! Numeric kernels behind the graph operations. Everything here works on flat
//! row-major slices and is deterministic for a fixed input.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// `c (+)= op(a) * op(b)` where `op` optionally transposes the stored matrix.
///
/// `a` is stored `(m, k)`, or `(k, m)` when `a_t`; `b` is stored `(k, n)`, or
/// `(n, k)` when `b_t`. `c` is `(m, n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm lhs length");
    assert_eq!(b.len(), k * n, "gemm rhs length");
    assert_eq!(c.len(), m * n, "gemm out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserted lengths cover every (row, col) reachable through
    // the strides computed above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_values<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        // every entry masked out
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Natural log of `sum(exp(row))`, stabilized.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

pub(crate) struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &[T],
    cols: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, LayerNormCache<T>) {
    let rows = x.len() / cols;
    let n = T::from_usize_lossy(cols);
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat[r * cols + c] = h;
            y[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cols: usize,
    gain: &[T],
    cache: &LayerNormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / cols;
    let n = T::from_usize_lossy(cols);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dg = vec![T::zero(); cols];
    let mut db = vec![T::zero(); cols];
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..rows {
        let off = r * cols;
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for c in 0..cols {
            let g = dy[off + c];
            let h = cache.xhat[off + c];
            dg[c] = dg[c] + g * h;
            db[c] = db[c] + g;
            dxhat[c] = g * gain[c];
            mean_d = mean_d + dxhat[c];
            mean_dx = mean_dx + dxhat[c] * h;
        }
        mean_d = mean_d / n;
        mean_dx = mean_dx / n;
        let rs = cache.rstd[r];
        for c in 0..cols {
            dx[off + c] = rs * (dxhat[c] - mean_d - cache.xhat[off + c] * mean_dx);
        }
    }
    (dx, dg, db)
}

/// Shape and masking of a batched multi-head scaled dot-product attention.
///
/// Queries are laid out `(batch * q_len, dim)` and keys/values
/// `(batch * k_len, dim)`; heads split `dim` into equal contiguous slices.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch * k_len` flags; `false` marks a padded key.
    pub key_valid: Vec<bool>,
}

impl AttentionSpec {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && !(self.causal && j > i)
    }
}

/// Returns the output and the attention probabilities
/// `(batch, heads, q_len, k_len)`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    spec: &AttentionSpec,
) -> (Vec<T>, Vec<T>) {
    let AttentionSpec {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *spec;
    let dh = dim / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut out = vec![T::zero(); batch * q_len * dim];
    let mut probs = vec![T::zero(); batch * heads * q_len * k_len];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..q_len {
                let qrow = &q[(b * q_len + i) * dim + col..][..dh];
                let p = &mut probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                for j in 0..k_len {
                    p[j] = if spec.allowed(b, i, j) {
                        let krow = &k[(b * k_len + j) * dim + col..][..dh];
                        dot(qrow, krow) * scale
                    } else {
                        T::neg_infinity()
                    };
                }
                softmax_in_place(p);
                let orow = &mut out[(b * q_len + i) * dim + col..][..dh];
                for j in 0..k_len {
                    let w = p[j];
                    if w == T::zero() {
                        continue;
                    }
                    let vrow = &v[(b * k_len + j) * dim + col..][..dh];
                    for c in 0..dh {
                        orow[c] = orow[c] + w * vrow[c];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dim: usize,
    spec: &AttentionSpec,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionSpec {
        batch,
        q_len,
        k_len,
        heads,
        ..
    } = *spec;
    let dh = dim / heads;
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); k_len];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..q_len {
                let qoff = (b * q_len + i) * dim + col;
                let dorow = &dout[qoff..][..dh];
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let mut weighted = T::zero();
                for j in 0..k_len {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let voff = (b * k_len + j) * dim + col;
                    dp[j] = dot(dorow, &v[voff..][..dh]);
                    weighted = weighted + p[j] * dp[j];
                    let dvrow = &mut dv[voff..][..dh];
                    for c in 0..dh {
                        dvrow[c] = dvrow[c] + p[j] * dorow[c];
                    }
                }
                for j in 0..k_len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let koff = (b * k_len + j) * dim + col;
                    for c in 0..dh {
                        dq[qoff + c] = dq[qoff + c] + ds * k[koff + c];
                        dk[koff + c] = dk[koff + c] + ds * q[qoff + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
