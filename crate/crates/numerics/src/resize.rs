//! Separable bilinear resampling with half-pixel centers and edge clamping.

use crate::error::{arg_err, dim_err, Result};
use crate::{Real, Tensor};

/// Source taps for resampling one axis from `in_len` to `out_len` samples.
///
/// Output sample `i` sits at source coordinate `(i + 0.5)·in/out − 0.5`,
/// clamped to `[0, in − 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisResampler {
    in_len: usize,
    out_len: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<Real>,
}

impl AxisResampler {
    pub fn new(in_len: usize, out_len: usize) -> Result<Self> {
        if in_len == 0 || out_len == 0 {
            return Err(arg_err(format!(
                "resize extents must be positive, got {in_len} -> {out_len}"
            )));
        }
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        let scale = in_len as f64 / out_len as f64;
        for i in 0..out_len {
            if in_len == out_len {
                lo.push(i);
                hi.push(i);
                frac.push(0.0);
                continue;
            }
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let l = src.floor() as usize;
            let h = (l + 1).min(in_len - 1);
            lo.push(l);
            hi.push(h);
            frac.push((src - l as f64) as Real);
        }
        Ok(Self { in_len, out_len, lo, hi, frac })
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.out_len
    }

    pub fn is_identity(&self) -> bool {
        self.in_len == self.out_len
    }

    /// Resamples the last axis of `src` (rows of length `in_len`) into `dst`.
    fn forward_last(&self, src: &[Real], dst: &mut [Real]) {
        for (s, d) in src.chunks_exact(self.in_len).zip(dst.chunks_exact_mut(self.out_len)) {
            if self.is_identity() {
                d.copy_from_slice(s);
                continue;
            }
            for i in 0..self.out_len {
                let t = self.frac[i];
                d[i] = s[self.lo[i]] * (1.0 - t) + s[self.hi[i]] * t;
            }
        }
    }

    fn adjoint_last(&self, g_out: &[Real], g_in: &mut [Real]) {
        for (go, gi) in g_out.chunks_exact(self.out_len).zip(g_in.chunks_exact_mut(self.in_len)) {
            if self.is_identity() {
                for (a, b) in gi.iter_mut().zip(go) {
                    *a += b;
                }
                continue;
            }
            for i in 0..self.out_len {
                let t = self.frac[i];
                gi[self.lo[i]] += go[i] * (1.0 - t);
                gi[self.hi[i]] += go[i] * t;
            }
        }
    }

    /// Resamples the middle axis of a `planes × in_len × inner` block.
    fn forward_mid(&self, src: &[Real], dst: &mut [Real], inner: usize) {
        let (ib, ob) = (self.in_len * inner, self.out_len * inner);
        for (s, d) in src.chunks_exact(ib).zip(dst.chunks_exact_mut(ob)) {
            for i in 0..self.out_len {
                let row = &mut d[i * inner..(i + 1) * inner];
                let a = &s[self.lo[i] * inner..(self.lo[i] + 1) * inner];
                if self.is_identity() {
                    row.copy_from_slice(a);
                    continue;
                }
                let b = &s[self.hi[i] * inner..(self.hi[i] + 1) * inner];
                let t = self.frac[i];
                for ((r, &x), &y) in row.iter_mut().zip(a).zip(b) {
                    *r = x * (1.0 - t) + y * t;
                }
            }
        }
    }

    fn adjoint_mid(&self, g_out: &[Real], g_in: &mut [Real], inner: usize) {
        let (ib, ob) = (self.in_len * inner, self.out_len * inner);
        for (go, gi) in g_out.chunks_exact(ob).zip(g_in.chunks_exact_mut(ib)) {
            for i in 0..self.out_len {
                let row = &go[i * inner..(i + 1) * inner];
                let t = self.frac[i];
                let (l, h) = (self.lo[i], self.hi[i]);
                for (j, &g) in row.iter().enumerate() {
                    if self.is_identity() {
                        gi[l * inner + j] += g;
                    } else {
                        gi[l * inner + j] += g * (1.0 - t);
                        gi[h * inner + j] += g * t;
                    }
                }
            }
        }
    }
}

/// Output shape and per-axis taps for resizing the trailing `H×W` axes.
pub(crate) fn plan(shape: &[usize], out_h: usize, out_w: usize) -> Result<(Vec<usize>, AxisResampler, AxisResampler)> {
    if shape.len() < 2 {
        return Err(dim_err(format!("resize needs at least 2 axes, got {shape:?}")));
    }
    let nd = shape.len();
    let rh = AxisResampler::new(shape[nd - 2], out_h)?;
    let rw = AxisResampler::new(shape[nd - 1], out_w)?;
    let mut out = shape.to_vec();
    out[nd - 2] = out_h;
    out[nd - 1] = out_w;
    Ok((out, rh, rw))
}

pub(crate) fn resize_forward(x: &[Real], planes: usize, rh: &AxisResampler, rw: &AxisResampler) -> Vec<Real> {
    let mut tmp = vec![0.0; planes * rh.in_len * rw.out_len];
    rw.forward_last(x, &mut tmp);
    let mut out = vec![0.0; planes * rh.out_len * rw.out_len];
    rh.forward_mid(&tmp, &mut out, rw.out_len);
    out
}

pub(crate) fn resize_adjoint(g: &[Real], planes: usize, rh: &AxisResampler, rw: &AxisResampler) -> Vec<Real> {
    let mut tmp = vec![0.0; planes * rh.in_len * rw.out_len];
    rh.adjoint_mid(g, &mut tmp, rw.out_len);
    let mut out = vec![0.0; planes * rh.in_len * rw.in_len];
    rw.adjoint_last(&tmp, &mut out);
    out
}

/// Bilinearly resizes the trailing two axes of `x` to `out_h × out_w`.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (shape, rh, rw) = plan(x.shape(), out_h, out_w)?;
    let planes = x.len() / (rh.in_len * rw.in_len);
    Tensor::new(shape, resize_forward(x.data(), planes, &rh, &rw))
}
