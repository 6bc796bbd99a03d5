//! Dense loops behind the tape ops. Every output element is produced by a
//! single thread in a fixed summation order, so results are bitwise
//! reproducible regardless of the worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::graph::{ConvDims, MatMulDims};
use crate::numerics::tensor::{cst, Scalar, Tensor};

/// Element strides of a logical `[batch, rows, cols]` operand.
#[derive(Clone, Copy)]
struct Strides {
    batch: usize,
    row: usize,
    col: usize,
}

const PAR_MIN_ROWS: usize = 64;

/// `out[b, i, j] = sum_k a[b, i, k] * b[b, k, j]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn strided_mm<T: Scalar>(
    a: &[T],
    sa: Strides,
    b: &[T],
    sb: Strides,
    batch: usize,
    p: usize,
    inner: usize,
    r: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * p * r];
    if r == 0 {
        return out;
    }
    let row_fn = |(row, o): (usize, &mut [T])| {
        let (bi, i) = (row / p, row % p);
        let a_off = bi * sa.batch + i * sa.row;
        let b_off = bi * sb.batch;
        for k in 0..inner {
            let aik = a[a_off + k * sa.col];
            let base = b_off + k * sb.row;
            if sb.col == 1 {
                for (oj, &bv) in o.iter_mut().zip(&b[base..base + r]) {
                    *oj += aik * bv;
                }
            } else {
                for (j, oj) in o.iter_mut().enumerate() {
                    *oj += aik * b[base + j * sb.col];
                }
            }
        }
    };
    if batch * p * inner * r >= 1 << 15 {
        out.par_chunks_mut(r).with_min_len(PAR_MIN_ROWS).enumerate().for_each(row_fn);
    } else {
        out.chunks_mut(r).enumerate().for_each(row_fn);
    }
    out
}

fn sum_batches<T: Scalar>(full: Vec<T>, batch: usize) -> Vec<T> {
    let n = full.len() / batch;
    let mut acc = vec![T::zero(); n];
    for chunk in full.chunks(n) {
        for (a, &v) in acc.iter_mut().zip(chunk) {
            *a += v;
        }
    }
    acc
}

pub(crate) fn matmul_fwd<T: Scalar>(a: &[T], b: &[T], d: &MatMulDims) -> Vec<T> {
    let sa = Strides { batch: if d.a_bcast { 0 } else { d.p * d.q }, row: d.q, col: 1 };
    let sb = Strides { batch: if d.b_bcast { 0 } else { d.q * d.r }, row: d.r, col: 1 };
    strided_mm(a, sa, b, sb, d.batch, d.p, d.q, d.r)
}

/// `dA = dOut @ B^T`, summed over the batch when `A` was broadcast.
pub(crate) fn matmul_grad_a<T: Scalar>(g: &[T], b: &[T], d: &MatMulDims) -> Vec<T> {
    let sg = Strides { batch: d.p * d.r, row: d.r, col: 1 };
    let sbt = Strides { batch: if d.b_bcast { 0 } else { d.q * d.r }, row: 1, col: d.r };
    let full = strided_mm(g, sg, b, sbt, d.batch, d.p, d.r, d.q);
    if d.a_bcast {
        sum_batches(full, d.batch)
    } else {
        full
    }
}

/// `dB = A^T @ dOut`, summed over the batch when `B` was broadcast.
pub(crate) fn matmul_grad_b<T: Scalar>(a: &[T], g: &[T], d: &MatMulDims) -> Vec<T> {
    if d.b_bcast {
        // A is contiguous [batch * p, q]: one product over the merged rows.
        let sat = Strides { batch: 0, row: 1, col: d.q };
        let sg = Strides { batch: 0, row: d.r, col: 1 };
        return strided_mm(a, sat, g, sg, 1, d.q, d.batch * d.p, d.r);
    }
    let sat = Strides { batch: if d.a_bcast { 0 } else { d.p * d.q }, row: 1, col: d.q };
    let sg = Strides { batch: d.p * d.r, row: d.r, col: 1 };
    strided_mm(a, sat, g, sg, d.batch, d.q, d.p, d.r)
}

/// Max-subtracted softmax along the last axis.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x.shape().last().ok_or_else(|| Error::Dimension("softmax on a scalar".into()))?;
    if c == 0 {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(c) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Tensor::from_vec(x.shape(), data)
}

const GELU_A: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let u = cst::<T>(SQRT_2_OVER_PI) * (x + cst::<T>(GELU_A) * x * x * x);
    cst::<T>(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = cst::<T>(SQRT_2_OVER_PI);
    let a = cst::<T>(GELU_A);
    let th = (k * (x + a * x * x * x)).tanh();
    let half = cst::<T>(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + cst::<T>(3.0) * a * x * x)
}

/// Per-row standardization over contiguous groups of `c`.
pub(crate) fn normalize_rows<T: Scalar>(x: &[T], c: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let inv_c = cst::<T>(1.0 / c as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / c);
    for (row, out) in x.chunks(c).zip(xhat.chunks_mut(c)) {
        let mean = row.iter().copied().sum::<T>() * inv_c;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let rs = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    (xhat, rstd)
}

/// Per-channel standardization over all rows (batch-norm statistics).
pub(crate) fn normalize_cols<T: Scalar>(x: &[T], c: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let (mean, var) = channel_moments(x, c);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let xhat = x.iter().enumerate().map(|(i, &v)| (v - mean[i % c]) * rstd[i % c]).collect();
    (xhat, rstd)
}

/// Per-channel mean and biased variance over all rows.
pub fn channel_moments<T: Scalar>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let inv = cst::<T>(1.0 / rows as f64);
    let mut mean = vec![T::zero(); c];
    for row in x.chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![T::zero(); c];
    for row in x.chunks(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv);
    (mean, var)
}

pub(crate) fn norm_rows_grad<T: Scalar>(g: &[T], xhat: &[T], rstd: &[T], gamma: &[T]) -> Vec<T> {
    let c = gamma.len();
    let inv_c = cst::<T>(1.0 / c as f64);
    let mut gx = vec![T::zero(); g.len()];
    for (r, ((gr, hr), out)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for k in 0..c {
            let gh = gr[k] * gamma[k];
            m1 += gh;
            m2 += gh * hr[k];
        }
        m1 *= inv_c;
        m2 *= inv_c;
        for k in 0..c {
            out[k] = rstd[r] * (gr[k] * gamma[k] - m1 - hr[k] * m2);
        }
    }
    gx
}

pub(crate) fn norm_cols_grad<T: Scalar>(g: &[T], xhat: &[T], rstd: &[T], gamma: &[T]) -> Vec<T> {
    let c = gamma.len();
    let rows = g.len() / c;
    let inv = cst::<T>(1.0 / rows as f64);
    let mut m1 = vec![T::zero(); c];
    let mut m2 = vec![T::zero(); c];
    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
        let gh = gv * gamma[i % c];
        m1[i % c] += gh;
        m2[i % c] += gh * h;
    }
    g.iter()
        .zip(xhat)
        .enumerate()
        .map(|(i, (&gv, &h))| {
            let k = i % c;
            rstd[k] * (gv * gamma[k] - m1[k] * inv - h * m2[k] * inv)
        })
        .collect()
}

pub(crate) fn conv1d_fwd<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &ConvDims) -> Vec<T> {
    let cin = d.groups * d.cin_g;
    let cout = d.groups * d.cout_g;
    let row_len = d.joints * cout;
    let mut out = vec![T::zero(); d.batch * d.t_out * row_len];
    let row_fn = |(row, o): (usize, &mut [T])| {
        let (b, to) = (row / d.t_out, row % d.t_out);
        for v in 0..d.joints {
            let ov = &mut o[v * cout..(v + 1) * cout];
            if let Some(bias) = bias {
                ov.copy_from_slice(bias);
            }
            for j in 0..d.kernel {
                let ti = (to * d.stride + j) as isize - d.pad as isize;
                if ti < 0 || ti as usize >= d.t_in {
                    continue;
                }
                let xrow = &x[((b * d.t_in + ti as usize) * d.joints + v) * cin..][..cin];
                for g in 0..d.groups {
                    for i in 0..d.cin_g {
                        let xv = xrow[g * d.cin_g + i];
                        let wrow = &w[((g * d.kernel + j) * d.cin_g + i) * d.cout_g..][..d.cout_g];
                        for (oo, &wv) in ov[g * d.cout_g..(g + 1) * d.cout_g].iter_mut().zip(wrow) {
                            *oo += xv * wv;
                        }
                    }
                }
            }
        }
    };
    out.par_chunks_mut(row_len).enumerate().for_each(row_fn);
    out
}

pub(crate) fn conv1d_bwd<T: Scalar>(g: &[T], x: &[T], w: &[T], d: &ConvDims) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cin = d.groups * d.cin_g;
    let cout = d.groups * d.cout_g;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let mut gb = vec![T::zero(); cout];
    for b in 0..d.batch {
        for to in 0..d.t_out {
            for v in 0..d.joints {
                let grow = &g[((b * d.t_out + to) * d.joints + v) * cout..][..cout];
                for (acc, &gv) in gb.iter_mut().zip(grow) {
                    *acc += gv;
                }
                for j in 0..d.kernel {
                    let ti = (to * d.stride + j) as isize - d.pad as isize;
                    if ti < 0 || ti as usize >= d.t_in {
                        continue;
                    }
                    let xoff = ((b * d.t_in + ti as usize) * d.joints + v) * cin;
                    for grp in 0..d.groups {
                        let gslice = &grow[grp * d.cout_g..(grp + 1) * d.cout_g];
                        for i in 0..d.cin_g {
                            let woff = ((grp * d.kernel + j) * d.cin_g + i) * d.cout_g;
                            let xv = x[xoff + grp * d.cin_g + i];
                            let mut acc = T::zero();
                            for o in 0..d.cout_g {
                                acc += gslice[o] * w[woff + o];
                                gw[woff + o] += gslice[o] * xv;
                            }
                            gx[xoff + grp * d.cin_g + i] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
