//! Scaled dot-product attention over row-major `rows × C` buffers.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-head softmax weights from a forward pass, `heads × nq × nk`.
#[derive(Debug, Clone)]
pub(crate) struct AttnProbs {
    pub probs: Vec<f64>,
    pub nq: usize,
    pub nk: usize,
    pub heads: usize,
}

pub(crate) fn logit_scale(c: usize, heads: usize, scaled: bool) -> f64 {
    if scaled {
        1.0 / ((c / heads) as f64).sqrt()
    } else {
        1.0
    }
}

/// `out = softmax(q·kᵀ·s) · v` per head, softmax over the key axis.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    nq: usize,
    nk: usize,
    c: usize,
    heads: usize,
    scaled: bool,
) -> (Vec<f64>, AttnProbs) {
    debug_assert_eq!(c % heads, 0);
    let dh = c / heads;
    let s = logit_scale(c, heads, scaled);
    let mut out = vec![0.0; nq * c];
    let mut probs = vec![0.0; heads * nq * nk];
    // Row-parallel over queries: each row is computed independently.
    let mut per_query: Vec<(&mut [f64], Vec<f64>)> = out
        .chunks_mut(c)
        .map(|row| (row, vec![0.0; heads * nk]))
        .collect();
    per_query
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, (orow, p))| {
            for h in 0..heads {
                let qi = &q[i * c + h * dh..i * c + (h + 1) * dh];
                let ph = &mut p[h * nk..(h + 1) * nk];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in ph.iter_mut().enumerate() {
                    let kj = &k[j * c + h * dh..j * c + (h + 1) * dh];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    *pj = dot * s;
                    max = max.max(*pj);
                }
                let mut z = 0.0;
                for pj in ph.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in ph.iter_mut() {
                    *pj /= z;
                }
                let oh = &mut orow[h * dh..(h + 1) * dh];
                for (j, pj) in ph.iter().enumerate() {
                    let vj = &v[j * c + h * dh..j * c + (h + 1) * dh];
                    for (o, vv) in oh.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        });
    for (i, (_, p)) in per_query.into_iter().enumerate() {
        for h in 0..heads {
            probs[(h * nq + i) * nk..(h * nq + i + 1) * nk]
                .copy_from_slice(&p[h * nk..(h + 1) * nk]);
        }
    }
    (
        out,
        AttnProbs {
            probs,
            nq,
            nk,
            heads,
        },
    )
}

/// Softmax weights `(heads, nq, nk)` for `q: (nq, C)` against `k: (nk, C)`.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize, scaled: bool) -> Result<Tensor> {
    let (nq, c) = q.dims2()?;
    let (nk, ck) = k.dims2()?;
    if c != ck || heads == 0 || c % heads != 0 || nk == 0 {
        return Err(Error::Dimension(format!(
            "attention over q {:?}, k {:?} with {heads} heads",
            q.shape(),
            k.shape()
        )));
    }
    let zeros = vec![0.0; nk * c];
    let (_, p) = attention_forward(q.data(), k.data(), &zeros, nq, nk, c, heads, scaled);
    Tensor::new(vec![heads, nq, nk], p.probs)
}

/// Returns `(dq, dk, dv)` for upstream gradient `dout`.
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &AttnProbs,
    dout: &[f64],
    c: usize,
    scaled: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnProbs { nq, nk, heads, .. } = *cache;
    let dh = c / heads;
    let s = logit_scale(c, heads, scaled);
    let mut dq = vec![0.0; nq * c];
    let mut dk = vec![0.0; nk * c];
    let mut dv = vec![0.0; nk * c];
    let mut ds = vec![0.0; nk];
    for h in 0..heads {
        for i in 0..nq {
            let p = &cache.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let di = &dout[i * c + h * dh..i * c + (h + 1) * dh];
            let mut dot = 0.0;
            for j in 0..nk {
                let vj = &v[j * c + h * dh..j * c + (h + 1) * dh];
                let dp: f64 = di.iter().zip(vj).map(|(a, b)| a * b).sum();
                ds[j] = dp;
                dot += p[j] * dp;
                let dvj = &mut dv[j * c + h * dh..j * c + (h + 1) * dh];
                for (o, g) in dvj.iter_mut().zip(di) {
                    *o += p[j] * g;
                }
            }
            let qi = &q[i * c + h * dh..i * c + (h + 1) * dh];
            for j in 0..nk {
                let dsj = p[j] * (ds[j] - dot) * s;
                if dsj == 0.0 {
                    continue;
                }
                let kj = &k[j * c + h * dh..j * c + (h + 1) * dh];
                let dqi = &mut dq[i * c + h * dh..i * c + (h + 1) * dh];
                for (o, kk) in dqi.iter_mut().zip(kj) {
                    *o += dsj * kk;
                }
                let dkj = &mut dk[j * c + h * dh..j * c + (h + 1) * dh];
                for (o, qq) in dkj.iter_mut().zip(qi) {
                    *o += dsj * qq;
                }
            }
        }
    }
    (dq, dk, dv)
}
