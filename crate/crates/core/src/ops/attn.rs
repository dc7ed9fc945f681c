//! Batched multi-head scaled dot-product attention kernels.
//!
//! Tokens are channels-last: `q` is `[B, Tq, C]`, `k`/`v` are `[B, Tk, C]`,
//! head `h` owns channels `h·d .. (h+1)·d` with `d = C / heads`.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::softmax_rows_inplace;
use crate::tensor::Tensor;

/// Additive logit terms, constant with respect to the inputs.
#[derive(Clone, Debug, Default)]
pub struct AttnBias {
    /// `[heads, Tq, Tk]`, shared by every batch entry (relative-position bias).
    pub rel: Option<Arc<Tensor>>,
    /// `[nWin, Tq, Tk]`; batch entry `b` uses mask `b % nWin` (shifted-window
    /// masking, filled with large negative values where attention is barred).
    pub mask: Option<Arc<Tensor>>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub b: usize,
    pub tq: usize,
    pub tk: usize,
    pub c: usize,
    pub heads: usize,
    pub scale: f32,
}

impl AttnGeom {
    pub(crate) fn new(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, bias: &AttnBias) -> Result<Self> {
        q.expect_rank("attention", 3)?;
        let (b, tq, c) = (q.dim(0), q.dim(1), q.dim(2));
        if k.rank() != 3 || k.dim(0) != b || k.dim(2) != c {
            return Err(Error::shape("attention", format!("k [{b}, Tk, {c}]"), format!("{:?}", k.shape())));
        }
        k.expect_same_shape("attention", v)?;
        let tk = k.dim(1);
        if heads == 0 || c % heads != 0 {
            return Err(Error::invalid(format!("attention: {c} channels not divisible by {heads} heads")));
        }
        if let Some(rel) = &bias.rel {
            if rel.shape() != [heads, tq, tk] {
                return Err(Error::shape("attention bias", format!("[{heads}, {tq}, {tk}]"), format!("{:?}", rel.shape())));
            }
        }
        if let Some(mask) = &bias.mask {
            if mask.rank() != 3 || mask.dim(1) != tq || mask.dim(2) != tk || b % mask.dim(0) != 0 {
                return Err(Error::shape("attention mask", format!("[nWin | {b}, {tq}, {tk}]"), format!("{:?}", mask.shape())));
            }
        }
        Ok(Self {
            b,
            tq,
            tk,
            c,
            heads,
            scale: 1.0 / ((c / heads) as f32).sqrt(),
        })
    }

    fn head_dim(&self) -> usize {
        self.c / self.heads
    }
}

/// Returns the attended values `[B, Tq, C]` and the attention probabilities
/// `[B, heads, Tq, Tk]`.
pub(crate) fn attn_forward(g: &AttnGeom, q: &[f32], k: &[f32], v: &[f32], bias: &AttnBias) -> (Vec<f32>, Vec<f32>) {
    let d = g.head_dim();
    let mut out = vec![0.0f32; g.b * g.tq * g.c];
    let mut probs = vec![0.0f32; g.b * g.heads * g.tq * g.tk];
    let rel = bias.rel.as_deref().map(Tensor::data);
    let mask = bias.mask.as_deref().map(|m| (m.dim(0), m.data()));
    let batch = |(bi, (o, p)): (usize, (&mut [f32], &mut [f32]))| {
        let qb = &q[bi * g.tq * g.c..(bi + 1) * g.tq * g.c];
        let kb = &k[bi * g.tk * g.c..(bi + 1) * g.tk * g.c];
        let vb = &v[bi * g.tk * g.c..(bi + 1) * g.tk * g.c];
        let mask = mask.map(|(nw, m)| {
            let w = bi % nw;
            &m[w * g.tq * g.tk..(w + 1) * g.tq * g.tk]
        });
        for h in 0..g.heads {
            let ph = &mut p[h * g.tq * g.tk..(h + 1) * g.tq * g.tk];
            for i in 0..g.tq {
                let qi = &qb[i * g.c + h * d..i * g.c + (h + 1) * d];
                let row = &mut ph[i * g.tk..(i + 1) * g.tk];
                for (j, logit) in row.iter_mut().enumerate() {
                    let kj = &kb[j * g.c + h * d..j * g.c + (h + 1) * d];
                    let mut dot = 0.0f32;
                    for (a, b) in qi.iter().zip(kj) {
                        dot += a * b;
                    }
                    *logit = dot * g.scale;
                }
                if let Some(rel) = rel {
                    let r = &rel[(h * g.tq + i) * g.tk..(h * g.tq + i + 1) * g.tk];
                    row.iter_mut().zip(r).for_each(|(l, b)| *l += b);
                }
                if let Some(m) = mask {
                    let r = &m[i * g.tk..(i + 1) * g.tk];
                    row.iter_mut().zip(r).for_each(|(l, b)| *l += b);
                }
                softmax_rows_inplace(row, g.tk);
                let oi = &mut o[i * g.c + h * d..i * g.c + (h + 1) * d];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vb[j * g.c + h * d..j * g.c + (h + 1) * d];
                    for (acc, &val) in oi.iter_mut().zip(vj) {
                        *acc += pij * val;
                    }
                }
            }
        }
    };
    let per_out = g.tq * g.c;
    let per_p = g.heads * g.tq * g.tk;
    out.par_chunks_mut(per_out)
        .zip(probs.par_chunks_mut(per_p))
        .enumerate()
        .for_each(batch);
    (out, probs)
}

/// Gradients of [`attn_forward`] with respect to `q`, `k` and `v`.
pub(crate) fn attn_backward(
    g: &AttnGeom,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    grad: &[f32],
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let d = g.head_dim();
    let mut dq = vec![0.0f32; q.len()];
    let mut dk = vec![0.0f32; k.len()];
    let mut dv = vec![0.0f32; v.len()];
    let (qs, ks) = (g.tq * g.c, g.tk * g.c);
    dq.par_chunks_mut(qs)
        .zip(dk.par_chunks_mut(ks))
        .zip(dv.par_chunks_mut(ks))
        .enumerate()
        .for_each(|(bi, ((dqb, dkb), dvb))| {
            let qb = &q[bi * qs..(bi + 1) * qs];
            let kb = &k[bi * ks..(bi + 1) * ks];
            let vb = &v[bi * ks..(bi + 1) * ks];
            let gb = &grad[bi * qs..(bi + 1) * qs];
            let pb = &probs[bi * g.heads * g.tq * g.tk..(bi + 1) * g.heads * g.tq * g.tk];
            let mut ds = vec![0.0f32; g.tk];
            for h in 0..g.heads {
                let ch = h * d..(h + 1) * d;
                for i in 0..g.tq {
                    let p = &pb[(h * g.tq + i) * g.tk..(h * g.tq + i + 1) * g.tk];
                    let gi = &gb[i * g.c + ch.start..i * g.c + ch.end];
                    let mut row_dot = 0.0f32;
                    for j in 0..g.tk {
                        let vj = &vb[j * g.c + ch.start..j * g.c + ch.end];
                        let dvj = &mut dvb[j * g.c + ch.start..j * g.c + ch.end];
                        let mut dp = 0.0f32;
                        for ((acc, &gv), &vv) in dvj.iter_mut().zip(gi).zip(vj) {
                            *acc += p[j] * gv;
                            dp += gv * vv;
                        }
                        ds[j] = dp;
                        row_dot += p[j] * dp;
                    }
                    let qi = &qb[i * g.c + ch.start..i * g.c + ch.end];
                    for j in 0..g.tk {
                        let s = p[j] * (ds[j] - row_dot) * g.scale;
                        if s == 0.0 {
                            continue;
                        }
                        let kj = &kb[j * g.c + ch.start..j * g.c + ch.end];
                        let dqi = &mut dqb[i * g.c + ch.start..i * g.c + ch.end];
                        for (acc, &kv) in dqi.iter_mut().zip(kj) {
                            *acc += s * kv;
                        }
                        let dkj = &mut dkb[j * g.c + ch.start..j * g.c + ch.end];
                        for (acc, &qv) in dkj.iter_mut().zip(qi) {
                            *acc += s * qv;
                        }
                    }
                }
            }
        });
    (dq, dk, dv)
}
