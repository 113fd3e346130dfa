//! Dense CPU kernels used by the autodiff graph.
//!
//! Every kernel is single-threaded and evaluates its reductions in a fixed
//! order, so results are bit-reproducible for a given input.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// `c[m, n] += a[m, k] * b[k, n]`.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], c_row);
        }
    }
}

/// `c[k, n] += a[m, k]^T * b[m, n]`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            axpy(av, b_row, &mut c[p * n..(p + 1) * n]);
        }
    }
}

/// `c[m, k] += a[m, n] * b[k, n]^T`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(a, &bt, c, m, n, k);
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight interleaved partial sums (fixed order).
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Copies columns `[start, start + width)` of a `[rows, cols]` matrix.
pub fn slice_cols<T: Real>(a: &[T], rows: usize, cols: usize, start: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * width);
    for i in 0..rows {
        out.extend_from_slice(&a[i * cols + start..i * cols + start + width]);
    }
    out
}

/// Numerically stable in-place softmax; returns `max + ln(sum)`.
pub fn softmax_in_place<T: Real>(row: &mut [T]) -> T {
    let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).libm_exp();
        s += *x;
    }
    let inv = T::one() / s;
    for x in row.iter_mut() {
        *x *= inv;
    }
    mx + s.libm_ln()
}

/// Geometry of a 2-D convolution over channel-last `[n, h, w, c]` maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.dilation * (self.k - 1) - 1) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.c
    }

    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky * self.dilation) as isize - self.pad as isize;
        let x = (ox * self.stride + kx * self.dilation) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds patches: output row per output pixel, columns ordered `(ky, kx, c)`.
pub fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * ho * wo * patch];
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let src = ((b * g.h + y) * g.w + x) * g.c;
                            let dst = row + (ky * g.k + kx) * g.c;
                            out[dst..dst + g.c].copy_from_slice(&input[src..src + g.c]);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input map.
pub fn col2im_acc<T: Real>(cols: &[T], g: &ConvGeom, input_grad: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let patch = g.patch();
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            let dst = ((b * g.h + y) * g.w + x) * g.c;
                            let src = row + (ky * g.k + kx) * g.c;
                            for ch in 0..g.c {
                                input_grad[dst + ch] += cols[src + ch];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Sparse row-mixing operator: `out[i, :] = sum_j w_ij * in[j, :]`.
///
/// Bilinear sampling, pooling, broadcasting and inverse-perspective lifting
/// are all expressed with this one operator.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMap<T> {
    pub n_out: usize,
    pub n_in: usize,
    row_ptr: Vec<usize>,
    idx: Vec<usize>,
    w: Vec<T>,
}

impl<T: Real> SparseMap<T> {
    /// Builds from per-output-row entry lists.
    pub fn from_rows(n_in: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut idx = Vec::new();
        let mut w = Vec::new();
        row_ptr.push(0);
        for r in rows {
            for &(j, wt) in r {
                debug_assert!(j < n_in);
                idx.push(j);
                w.push(T::of(wt));
            }
            row_ptr.push(idx.len());
        }
        Self {
            n_out: rows.len(),
            n_in,
            row_ptr,
            idx,
            w,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.idx[a..b].iter().copied().zip(self.w[a..b].iter().copied())
    }

    pub fn apply(&self, input: &[T], cols: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.n_out * cols];
        for i in 0..self.n_out {
            let dst = &mut out[i * cols..(i + 1) * cols];
            for (j, wt) in self.row(i) {
                axpy(wt, &input[j * cols..(j + 1) * cols], dst);
            }
        }
        out
    }

    pub fn apply_transpose_acc(&self, grad_out: &[T], cols: usize, grad_in: &mut [T]) {
        for i in 0..self.n_out {
            let src = &grad_out[i * cols..(i + 1) * cols];
            for (j, wt) in self.row(i) {
                axpy(wt, src, &mut grad_in[j * cols..(j + 1) * cols]);
            }
        }
    }
}

const ATTN_BLOCK: usize = 32;

/// Shapes of a fused multi-head scaled dot-product attention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnGeom {
    pub n_query: usize,
    pub n_key: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

fn head_transposed<T: Real>(x: &[T], rows: usize, cols: usize, start: usize, width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); width * rows];
    for r in 0..rows {
        for c in 0..width {
            out[c * rows + r] = x[r * cols + start + c];
        }
    }
    out
}

/// Scores `scale * q_i . k_j` for a block of queries of one head, written
/// row-major into `s` (`[block, n_key]`).
fn block_scores<T: Real>(
    q: &[T],
    kt: &[T],
    g: &AttnGeom,
    head: usize,
    rows: core::ops::Range<usize>,
    scale: T,
    s: &mut [T],
) {
    let m = g.n_key;
    let qc = g.heads * g.d_k;
    for (bi, i) in rows.enumerate() {
        let srow = &mut s[bi * m..(bi + 1) * m];
        srow.iter_mut().for_each(|x| *x = T::zero());
        for p in 0..g.d_k {
            let a = q[i * qc + head * g.d_k + p] * scale;
            axpy(a, &kt[p * m..(p + 1) * m], srow);
        }
    }
}

/// Forward pass. Returns the output `[n_query, heads * d_v]` and the
/// per-(query, head) log-sum-exp of the scaled scores.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], g: &AttnGeom, scale: T) -> (Vec<T>, Vec<T>) {
    let (l, m) = (g.n_query, g.n_key);
    let oc = g.heads * g.d_v;
    let mut out = vec![T::zero(); l * oc];
    let mut lse = vec![T::zero(); l * g.heads];
    let mut s = vec![T::zero(); ATTN_BLOCK * m];
    for h in 0..g.heads {
        let kt = head_transposed(k, m, g.heads * g.d_k, h * g.d_k, g.d_k);
        let vt = head_transposed(v, m, oc, h * g.d_v, g.d_v);
        for i0 in (0..l).step_by(ATTN_BLOCK) {
            let i1 = (i0 + ATTN_BLOCK).min(l);
            block_scores(q, &kt, g, h, i0..i1, scale, &mut s);
            for (bi, i) in (i0..i1).enumerate() {
                let p = &mut s[bi * m..(bi + 1) * m];
                lse[i * g.heads + h] = softmax_in_place(p);
                for c in 0..g.d_v {
                    out[i * oc + h * g.d_v + c] = dot(p, &vt[c * m..(c + 1) * m]);
                }
            }
        }
    }
    (out, lse)
}

/// Row-stochastic attention weights `[heads, n_query, n_key]`, computed with
/// the same kernels as [`attention_forward`].
pub fn attention_weights<T: Real>(q: &[T], k: &[T], g: &AttnGeom, scale: T) -> Vec<T> {
    let (l, m) = (g.n_query, g.n_key);
    let mut out = vec![T::zero(); g.heads * l * m];
    let mut s = vec![T::zero(); ATTN_BLOCK * m];
    for h in 0..g.heads {
        let kt = head_transposed(k, m, g.heads * g.d_k, h * g.d_k, g.d_k);
        for i0 in (0..l).step_by(ATTN_BLOCK) {
            let i1 = (i0 + ATTN_BLOCK).min(l);
            block_scores(q, &kt, g, h, i0..i1, scale, &mut s);
            for (bi, i) in (i0..i1).enumerate() {
                let p = &mut s[bi * m..(bi + 1) * m];
                softmax_in_place(p);
                out[(h * l + i) * m..(h * l + i + 1) * m].copy_from_slice(p);
            }
        }
    }
    out
}

pub struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

/// Backward pass; recomputes probabilities block by block from `lse`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    out: &[T],
    lse: &[T],
    d_out: &[T],
    g: &AttnGeom,
    scale: T,
) -> AttnGrads<T> {
    let (l, m) = (g.n_query, g.n_key);
    let qc = g.heads * g.d_k;
    let oc = g.heads * g.d_v;
    let mut dq = vec![T::zero(); l * qc];
    let mut dk = vec![T::zero(); m * qc];
    let mut dv = vec![T::zero(); m * oc];
    let mut s = vec![T::zero(); ATTN_BLOCK * m];
    let mut dp = vec![T::zero(); m];
    for h in 0..g.heads {
        let kt = head_transposed(k, m, qc, h * g.d_k, g.d_k);
        let vt = head_transposed(v, m, oc, h * g.d_v, g.d_v);
        let mut dkt = vec![T::zero(); g.d_k * m];
        let mut dvt = vec![T::zero(); g.d_v * m];
        for i0 in (0..l).step_by(ATTN_BLOCK) {
            let i1 = (i0 + ATTN_BLOCK).min(l);
            block_scores(q, &kt, g, h, i0..i1, scale, &mut s);
            for (bi, i) in (i0..i1).enumerate() {
                let p = &mut s[bi * m..(bi + 1) * m];
                let lse_i = lse[i * g.heads + h];
                for x in p.iter_mut() {
                    *x = (*x - lse_i).libm_exp();
                }
                let d_o = &d_out[i * oc + h * g.d_v..i * oc + (h + 1) * g.d_v];
                let o = &out[i * oc + h * g.d_v..i * oc + (h + 1) * g.d_v];
                // dV^T[c, :] += dO[i, c] * P[i, :]
                for c in 0..g.d_v {
                    axpy(d_o[c], p, &mut dvt[c * m..(c + 1) * m]);
                }
                // dP[i, :] = dO[i, :] V^T
                dp.iter_mut().for_each(|x| *x = T::zero());
                for c in 0..g.d_v {
                    axpy(d_o[c], &vt[c * m..(c + 1) * m], &mut dp);
                }
                let delta: T = d_o.iter().zip(o).map(|(&a, &b)| a * b).sum();
                // dS = P * (dP - delta), scaled once here
                for (x, &pv) in dp.iter_mut().zip(p.iter()) {
                    *x = pv * (*x - delta) * scale;
                }
                for pk in 0..g.d_k {
                    dq[i * qc + h * g.d_k + pk] += dot(&dp, &kt[pk * m..(pk + 1) * m]);
                    let qv = q[i * qc + h * g.d_k + pk];
                    axpy(qv, &dp, &mut dkt[pk * m..(pk + 1) * m]);
                }
            }
        }
        for j in 0..m {
            for pk in 0..g.d_k {
                dk[j * qc + h * g.d_k + pk] = dkt[pk * m + j];
            }
            for c in 0..g.d_v {
                dv[j * oc + h * g.d_v + c] = dvt[c * m + j];
            }
        }
    }
    AttnGrads { dq, dk, dv }
}
