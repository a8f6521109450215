//! Fused attention kernels. Each batch element is independent and handled by
//! one rayon task, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::gemm::gemm;
use crate::ops::softmax_in_place;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Model width (self-attention) or value width (master query).
    pub dim: usize,
    /// Per-head key width; master query only.
    pub key_dim: usize,
}

pub(crate) fn self_attention_forward(qkv: &[Real], c: &AttnShape) -> (Vec<Real>, Vec<Real>) {
    let (s, d, h) = (c.seq, c.dim, c.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as Real).sqrt();
    let row = 3 * d as isize;
    let mut out = vec![0.0; c.batch * s * d];
    let mut probs = vec![0.0; c.batch * h * s * s];
    if s == 0 {
        return (out, probs);
    }
    out.par_chunks_mut(s * d)
        .zip(probs.par_chunks_mut(h * s * s))
        .enumerate()
        .for_each(|(b, (ob, pb))| {
            let base = b * s * 3 * d;
            for head in 0..h {
                let q = &qkv[base + head * dh..];
                let k = &qkv[base + d + head * dh..];
                let v = &qkv[base + 2 * d + head * dh..];
                let p = &mut pb[head * s * s..(head + 1) * s * s];
                gemm(s, dh, s, q, row, 1, k, 1, row, 0.0, p, s as isize, 1);
                for r in p.chunks_exact_mut(s) {
                    for x in r.iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(r);
                }
                gemm(s, s, dh, p, s as isize, 1, v, row, 1, 0.0, &mut ob[head * dh..], d as isize, 1);
            }
        });
    (out, probs)
}

pub(crate) fn self_attention_backward(qkv: &[Real], probs: &[Real], g: &[Real], c: &AttnShape) -> Vec<Real> {
    let (s, d, h) = (c.seq, c.dim, c.heads);
    let dh = d / h;
    let scale = 1.0 / (dh as Real).sqrt();
    let row = 3 * d as isize;
    let mut gqkv = vec![0.0; qkv.len()];
    if s == 0 {
        return gqkv;
    }
    gqkv.par_chunks_mut(s * 3 * d).enumerate().for_each(|(b, gb)| {
        let base = b * s * 3 * d;
        let mut gp = vec![0.0; s * s];
        for head in 0..h {
            let p = &probs[(b * h + head) * s * s..(b * h + head + 1) * s * s];
            let go = &g[b * s * d + head * dh..];
            let q = &qkv[base + head * dh..];
            let k = &qkv[base + d + head * dh..];
            let v = &qkv[base + 2 * d + head * dh..];
            // dV = Pᵀ·dO
            gemm(s, s, dh, p, 1, s as isize, go, d as isize, 1, 1.0, &mut gb[2 * d + head * dh..], row, 1);
            // dP = dO·Vᵀ
            gemm(s, dh, s, go, d as isize, 1, v, 1, row, 0.0, &mut gp, s as isize, 1);
            for (gr, pr) in gp.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
                let dot: Real = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (x, &pv) in gr.iter_mut().zip(pr) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ = dS·K, dK = dSᵀ·Q
            gemm(s, s, dh, &gp, s as isize, 1, k, row, 1, 1.0, &mut gb[head * dh..], row, 1);
            gemm(s, s, dh, &gp, 1, s as isize, q, row, 1, 1.0, &mut gb[d + head * dh..], row, 1);
        }
    });
    gqkv
}

pub(crate) fn master_query_forward(keys: &[Real], values: &[Real], queries: &[Real], c: &AttnShape) -> (Vec<Real>, Vec<Real>) {
    let (s, h, v, dk) = (c.seq, c.heads, c.dim, c.key_dim);
    let dv = v / h;
    let scale = 1.0 / (dk as Real).sqrt();
    let mut out = vec![0.0; c.batch * v];
    let mut probs = vec![0.0; c.batch * h * s];
    if s == 0 || v == 0 {
        return (out, probs);
    }
    out.par_chunks_mut(v)
        .zip(probs.par_chunks_mut(h * s))
        .enumerate()
        .for_each(|(b, (ob, pb))| {
            for head in 0..h {
                let q = &queries[head * dk..(head + 1) * dk];
                let a = &mut pb[head * s..(head + 1) * s];
                for (t, at) in a.iter_mut().enumerate() {
                    let k = &keys[(b * s + t) * h * dk + head * dk..][..dk];
                    *at = q.iter().zip(k).map(|(x, y)| x * y).sum::<Real>() * scale;
                }
                softmax_in_place(a);
                let o = &mut ob[head * dv..(head + 1) * dv];
                for (t, &at) in a.iter().enumerate() {
                    let vt = &values[(b * s + t) * v + head * dv..][..dv];
                    for (x, y) in o.iter_mut().zip(vt) {
                        *x += at * y;
                    }
                }
            }
        });
    (out, probs)
}

pub(crate) fn master_query_backward(
    keys: &[Real],
    values: &[Real],
    queries: &[Real],
    probs: &[Real],
    g: &[Real],
    c: &AttnShape,
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let (s, h, v, dk) = (c.seq, c.heads, c.dim, c.key_dim);
    let dv = if h == 0 { 0 } else { v / h };
    let scale = 1.0 / (dk as Real).sqrt();
    let mut gk = vec![0.0; keys.len()];
    let mut gv = vec![0.0; values.len()];
    let mut gq = vec![0.0; queries.len()];
    if s == 0 || v == 0 {
        return (gk, gv, gq);
    }
    let partial_q: Vec<Vec<Real>> = gk
        .par_chunks_mut(s * h * dk)
        .zip(gv.par_chunks_mut(s * v))
        .enumerate()
        .map(|(b, (gkb, gvb))| {
            let mut gqb = vec![0.0; h * dk];
            let mut ga = vec![0.0; s];
            for head in 0..h {
                let a = &probs[(b * h + head) * s..(b * h + head + 1) * s];
                let go = &g[b * v + head * dv..][..dv];
                for t in 0..s {
                    let vt = &values[(b * s + t) * v + head * dv..][..dv];
                    ga[t] = go.iter().zip(vt).map(|(x, y)| x * y).sum();
                    let gvt = &mut gvb[t * v + head * dv..][..dv];
                    for (x, y) in gvt.iter_mut().zip(go) {
                        *x += a[t] * y;
                    }
                }
                let dot: Real = a.iter().zip(&ga).map(|(x, y)| x * y).sum();
                let q = &queries[head * dk..(head + 1) * dk];
                for t in 0..s {
                    let gs = a[t] * (ga[t] - dot) * scale;
                    let k = &keys[(b * s + t) * h * dk + head * dk..][..dk];
                    for p in 0..dk {
                        gqb[head * dk + p] += gs * k[p];
                        gkb[t * h * dk + head * dk + p] += gs * q[p];
                    }
                }
            }
            gqb
        })
        .collect();
    for part in &partial_q {
        for (x, y) in gq.iter_mut().zip(part) {
            *x += y;
        }
    }
    (gk, gv, gq)
}
