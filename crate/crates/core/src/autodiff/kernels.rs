//! Dense loops shared by forward and backward rules. Every kernel computes an
//! output row from its own input row only, in a fixed summation order, so
//! results never depend on how many rows are batched together.

use crate::error::{Error, Result};

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.fill(0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with four interleaved partial sums (a fixed order, so still
/// deterministic) to let the compiler vectorize.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// How an operand of a binary op maps onto the output index space.
#[derive(Clone, Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Operand equals the trailing dimensions of the output.
    Suffix(usize),
    /// Operand is `[rows, 1]`-like: one value per block of `inner` outputs.
    PerRow(usize),
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn plan(out: &[usize], operand: &[usize], op: &'static str) -> Result<Self> {
        if out == operand {
            return Ok(Broadcast::Same);
        }
        if operand.len() > out.len() {
            return Err(Error::shape(op, format!("{operand:?} does not broadcast to {out:?}")));
        }
        let pad = out.len() - operand.len();
        let mut padded = vec![1usize; pad];
        padded.extend_from_slice(operand);
        for (&o, &d) in out.iter().zip(&padded) {
            if d != o && d != 1 {
                return Err(Error::shape(op, format!("{operand:?} does not broadcast to {out:?}")));
            }
        }
        let n_op: usize = operand.iter().product();
        if out[pad..] == *operand {
            return Ok(Broadcast::Suffix(n_op));
        }
        // [.., R, 1] against [.., R, C] with identical leading dims
        if let (Some(&1), Some(&inner)) = (padded.last(), out.last()) {
            if padded[..padded.len() - 1] == out[..out.len() - 1] {
                return Ok(Broadcast::PerRow(inner));
            }
        }
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for ax in (0..out.len()).rev() {
            if padded[ax] != 1 {
                strides[ax] = acc;
            }
            acc *= padded[ax];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Broadcast::Map(map))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(n) => i % n,
            Broadcast::PerRow(inner) => i / inner,
            Broadcast::Map(m) => m[i],
        }
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

pub(crate) fn logsumexp_row(src: &[f64]) -> f64 {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
}
