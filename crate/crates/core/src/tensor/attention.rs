//! Fused multi-head scaled dot-product attention.
//!
//! Only the softmax probabilities and the dropout keep-mask are retained for
//! the backward pass; per-head slices are gathered into small contiguous
//! buffers on the fly.

use super::gemm;
use super::ops::{dropout_mask, softmax_in_place, Op};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub(crate) struct AttentionState {
    q: Var,
    k: Var,
    v: Var,
    dims: Dims,
    /// `[b, h, tq, t]`, before dropout.
    probs: Vec<f64>,
    keep: Option<(Vec<bool>, f64)>,
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    tq: usize,
    t: usize,
    d: usize,
    h: usize,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.h
    }

    fn scale(&self) -> f64 {
        1.0 / (self.dh() as f64).sqrt()
    }
}

/// Copy head `hi` of a `[rows, d]` row-major block into `[rows, dh]`.
fn gather(src: &[f64], rows: usize, d: usize, dh: usize, hi: usize, out: &mut [f64]) {
    for r in 0..rows {
        out[r * dh..(r + 1) * dh].copy_from_slice(&src[r * d + hi * dh..r * d + (hi + 1) * dh]);
    }
}

fn scatter_add(dst: &mut [f64], rows: usize, d: usize, dh: usize, hi: usize, src: &[f64]) {
    for r in 0..rows {
        let o = &mut dst[r * d + hi * dh..r * d + (hi + 1) * dh];
        o.iter_mut().zip(&src[r * dh..(r + 1) * dh]).for_each(|(a, b)| *a += b);
    }
}

impl<'a> Tape<'a> {
    /// `softmax(Q_h K_hᵀ / sqrt(d/h)) V_h` per head, heads concatenated.
    ///
    /// `q` is `[b, tq, d]`, `k` and `v` are `[b, t, d]`. With `dropout`, the
    /// probabilities are dropped out (inverted scaling) before weighting `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, dropout: Option<(f64, &mut Rng)>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape(format!("attention q {sq:?}, k {sk:?}, v {sv:?}")));
        }
        let dims = Dims { b: sq[0], tq: sq[1], t: sk[1], d: sq[2], h: n_heads };
        if n_heads == 0 || !dims.d.is_multiple_of(n_heads) {
            return Err(Error::shape(format!("width {} not divisible into {n_heads} heads", dims.d)));
        }
        let keep = match dropout {
            Some((rate, _)) if !(0.0..1.0).contains(&rate) => {
                return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
            }
            Some((rate, rng)) if rate > 0.0 => {
                let n = dims.b * dims.h * dims.tq * dims.t;
                Some((dropout_mask(n, rate, rng), 1.0 / (1.0 - rate)))
            }
            _ => None,
        };
        let Dims { b, tq, t, d, h } = dims;
        let dh = dims.dh();
        let scale = dims.scale();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let keep_ref = keep.as_ref();
        let per_batch = self.exec.map(b, |bi| {
            let qb = &qv[bi * tq * d..(bi + 1) * tq * d];
            let kb = &kv[bi * t * d..(bi + 1) * t * d];
            let vb = &vv[bi * t * d..(bi + 1) * t * d];
            let mut out = vec![0.0; tq * d];
            let mut probs = vec![0.0; h * tq * t];
            let (mut qh, mut kh, mut vh) = (vec![0.0; tq * dh], vec![0.0; t * dh], vec![0.0; t * dh]);
            let mut pd = vec![0.0; tq * t];
            let mut oh = vec![0.0; tq * dh];
            for hi in 0..h {
                gather(qb, tq, d, dh, hi, &mut qh);
                gather(kb, t, d, dh, hi, &mut kh);
                gather(vb, t, d, dh, hi, &mut vh);
                let p = &mut probs[hi * tq * t..(hi + 1) * tq * t];
                gemm(tq, dh, t, &qh, false, &kh, true, p, false);
                p.iter_mut().for_each(|s| *s *= scale);
                if t > 0 {
                    p.chunks_mut(t).for_each(softmax_in_place);
                }
                let weights: &[f64] = match keep_ref {
                    Some((mask, s)) => {
                        let off = (bi * h + hi) * tq * t;
                        for (j, w) in pd.iter_mut().enumerate() {
                            *w = if mask[off + j] { p[j] * s } else { 0.0 };
                        }
                        &pd
                    }
                    None => p,
                };
                gemm(tq, t, dh, weights, false, &vh, false, &mut oh, false);
                scatter_add(&mut out, tq, d, dh, hi, &oh);
            }
            (out, probs)
        });
        let mut out = Vec::with_capacity(b * tq * d);
        let mut probs = Vec::with_capacity(b * h * tq * t);
        for (o, p) in per_batch {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let rg = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        let state = AttentionState { q, k, v, dims, probs, keep };
        Ok(self.push(vec![b, tq, d], out, Op::Attention(Box::new(state)), rg))
    }

    /// Pre-dropout probabilities `[b, h, tq, t]` of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }
}

impl AttentionState {
    pub(crate) fn backward(&self, tape: &Tape<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Dims { b, tq, t, d, h } = self.dims;
        let dh = self.dims.dh();
        let scale = self.dims.scale();
        let (qv, kv, vv) = (tape.value(self.q), tape.value(self.k), tape.value(self.v));
        let per_batch = tape.exec.map(b, |bi| {
            let qb = &qv[bi * tq * d..(bi + 1) * tq * d];
            let kb = &kv[bi * t * d..(bi + 1) * t * d];
            let vb = &vv[bi * t * d..(bi + 1) * t * d];
            let gb = &g[bi * tq * d..(bi + 1) * tq * d];
            let (mut dq, mut dk, mut dv) = (vec![0.0; tq * d], vec![0.0; t * d], vec![0.0; t * d]);
            let (mut qh, mut kh, mut vh, mut gh) = (vec![0.0; tq * dh], vec![0.0; t * dh], vec![0.0; t * dh], vec![0.0; tq * dh]);
            let mut pd = vec![0.0; tq * t];
            let mut dp = vec![0.0; tq * t];
            let (mut dqh, mut dkh, mut dvh) = (vec![0.0; tq * dh], vec![0.0; t * dh], vec![0.0; t * dh]);
            for hi in 0..h {
                gather(qb, tq, d, dh, hi, &mut qh);
                gather(kb, t, d, dh, hi, &mut kh);
                gather(vb, t, d, dh, hi, &mut vh);
                gather(gb, tq, d, dh, hi, &mut gh);
                let off = (bi * h + hi) * tq * t;
                let p = &self.probs[off..off + tq * t];
                let weights: &[f64] = match &self.keep {
                    Some((mask, s)) => {
                        for (j, w) in pd.iter_mut().enumerate() {
                            *w = if mask[off + j] { p[j] * s } else { 0.0 };
                        }
                        &pd
                    }
                    None => p,
                };
                // out_h = W v_h
                gemm(t, tq, dh, weights, true, &gh, false, &mut dvh, false);
                gemm(tq, dh, t, &gh, false, &vh, true, &mut dp, false);
                if let Some((mask, s)) = &self.keep {
                    for (j, x) in dp.iter_mut().enumerate() {
                        *x = if mask[off + j] { *x * s } else { 0.0 };
                    }
                }
                // softmax backward, folded with the 1/sqrt(dh) scale
                if t > 0 {
                    for (drow, prow) in dp.chunks_mut(t).zip(p.chunks(t)) {
                        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for (x, &pj) in drow.iter_mut().zip(prow) {
                            *x = pj * (*x - dot) * scale;
                        }
                    }
                }
                gemm(tq, t, dh, &dp, false, &kh, false, &mut dqh, false);
                gemm(t, tq, dh, &dp, true, &qh, false, &mut dkh, false);
                scatter_add(&mut dq, tq, d, dh, hi, &dqh);
                scatter_add(&mut dk, t, d, dh, hi, &dkh);
                scatter_add(&mut dv, t, d, dh, hi, &dvh);
            }
            (dq, dk, dv)
        });
        for (var, pick) in [(self.q, 0usize), (self.k, 1), (self.v, 2)] {
            let Some(slot) = tape.grad_slot(grads, var) else { continue };
            for (bi, parts) in per_batch.iter().enumerate() {
                let (src, rows) = match pick {
                    0 => (&parts.0, tq),
                    1 => (&parts.1, t),
                    _ => (&parts.2, t),
                };
                slot[bi * rows * d..(bi + 1) * rows * d]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}
