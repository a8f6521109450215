use crate::attention::{self, AttnShape};
use crate::error::{arg_err, dim_err, Result};
use crate::gemm::{gemm, mm};
use crate::resize::{plan, resize_forward};
use crate::tape::{gelu, Op, Tape, Var};
use crate::tensor::{inverse_permutation, is_permutation};
use crate::{Real, Tensor};

/// Splits `shape` into (rows, last extent).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    (if cols == 0 { 0 } else { total / cols }, cols)
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise division by a constant.
    pub fn div(&mut self, a: Var, d: Real) -> Var {
        let v = self.value(a).map(|x| x / d);
        self.push(v, Op::Divide(a, d))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum of a list of same-shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| arg_err("add_all needs at least one operand"))?;
        let mut acc = *first;
        for v in rest {
            acc = self.add(acc, *v)?;
        }
        Ok(acc)
    }

    /// Product of 2-D `a: m×k` and `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b, m, k, n }))
    }

    /// Affine map over the last axis: `x·w + b` with `w: in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, inp) = rows_cols(&xs);
        if ws.len() != 2 || ws[0] != inp {
            return Err(dim_err(format!("linear input {xs:?} with weight {ws:?}")));
        }
        let out = ws[1];
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return Err(dim_err(format!("bias {:?} for output width {out}", bv.shape())));
            }
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            rows,
            inp,
            out,
            self.value(x).data(),
            inp as isize,
            1,
            self.value(w).data(),
            out as isize,
            1,
            1.0,
            &mut y,
            out as isize,
            1,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b, rows, inp, out }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        if !is_permutation(perm) {
            return Err(arg_err(format!("{perm:?} is not a permutation")));
        }
        let v = self.value(x).permute(perm)?;
        Ok(self.push(v, Op::Permute { x, inverse: inverse_permutation(perm) }))
    }

    /// Stacks values along their leading axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| arg_err("concat of zero parts"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(dim_err(format!("concat of {:?} onto rows of {tail:?}", s)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Selects leading-axis rows by index; indices may repeat.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.is_empty() {
            return Err(dim_err("gather from a scalar"));
        }
        let width: usize = s[1..].iter().product();
        let sv = self.value(src).data();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= s[0] {
                return Err(arg_err(format!("row {i} out of range for {} rows", s[0])));
            }
            data.extend_from_slice(&sv[i * width..(i + 1) * width]);
        }
        let mut shape = s;
        shape[0] = idx.len();
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows { src, idx: idx.to_vec() }))
    }

    /// Normalizes over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&xs);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(dim_err(format!("layer norm of width {d} with affine {:?}", self.shape(gamma))));
        }
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut y = vec![0.0; xv.len()];
        for (xr, yr) in xv.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
            let mu = xr.iter().sum::<Real>() / d as Real;
            let var = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<Real>() / d as Real;
            let r = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                yr[j] = (xr[j] - mu) * r * gv[j] + bv[j];
            }
            mean.push(mu);
            rstd.push(r);
        }
        Ok(self.push(Tensor::new(xs, y)?, Op::LayerNorm { x, gamma, beta, mean, rstd }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_last(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    /// Bilinear resize of the trailing two axes (half-pixel centers, clamped edges).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (shape, rh, rw) = plan(self.shape(x), out_h, out_w)?;
        let planes = self.value(x).len() / (rh.in_len() * rw.in_len());
        let data = resize_forward(self.value(x).data(), planes, &rh, &rw);
        Ok(self.push(Tensor::new(shape, data)?, Op::Resize { x, rh, rw }))
    }

    /// Multi-head scaled dot-product self-attention over `batch` independent
    /// sequences of length `seq`.
    ///
    /// `qkv` is `(batch·seq) × 3D` with query, key and value blocks side by
    /// side; the result is `(batch·seq) × D`.
    pub fn self_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || s[0] != batch * seq || s[1] % 3 != 0 || (s[1] / 3) % heads != 0 {
            return Err(dim_err(format!(
                "attention input {s:?} for batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        let cfg = AttnShape { batch, seq, heads, dim: s[1] / 3, key_dim: 0 };
        let (out, probs) = attention::self_attention_forward(self.value(qkv).data(), &cfg);
        let t = Tensor::new(vec![batch * seq, cfg.dim], out)?;
        Ok(self.push(t, Op::SelfAttention { qkv, cfg, probs }))
    }

    /// Attention of one learned query per head over each sequence.
    ///
    /// `keys: (batch·seq) × heads·key_dim`, `values: (batch·seq) × V`,
    /// `queries: heads × key_dim`; values are split into `heads` channel
    /// groups. Returns `batch × V`.
    pub fn master_query_attention(&mut self, keys: Var, values: Var, queries: Var, batch: usize, seq: usize) -> Result<Var> {
        let (ks, vs, qs) = (self.shape(keys).to_vec(), self.shape(values).to_vec(), self.shape(queries).to_vec());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
            return Err(dim_err(format!("master-query attention of {ks:?}, {vs:?}, {qs:?}")));
        }
        let (heads, key_dim) = (qs[0], qs[1]);
        if ks != [batch * seq, heads * key_dim] || vs[0] != batch * seq || vs[1] % heads != 0 {
            return Err(dim_err(format!(
                "master-query attention keys {ks:?}, values {vs:?}, queries {qs:?}, batch {batch}, seq {seq}"
            )));
        }
        let cfg = AttnShape { batch, seq, heads, dim: vs[1], key_dim };
        let (out, probs) = attention::master_query_forward(
            self.value(keys).data(),
            self.value(values).data(),
            self.value(queries).data(),
            &cfg,
        );
        let t = Tensor::new(vec![batch, cfg.dim], out)?;
        Ok(self.push(t, Op::MasterQuery { keys, values, queries, cfg, probs }))
    }

    /// Sum of squared differences over elements where `mask` is set.
    pub fn masked_sse(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || mask.len() != p.len() {
            return Err(dim_err(format!(
                "masked loss of {:?} against {:?} with {} mask entries",
                p.shape(),
                target.shape(),
                mask.len()
            )));
        }
        let weighted_diff: Vec<Real> = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask)
            .map(|((a, b), &m)| if m { a - b } else { 0.0 })
            .collect();
        let sse = weighted_diff.iter().map(|d| d * d).sum();
        Ok(self.push(Tensor::scalar(sse), Op::MaskedSse { pred, weighted_diff }))
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    if d == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ParamStore;

    #[test]
    fn softmax_uniform_and_stable() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4]));
        let y = t.softmax(x);
        assert_eq!(t.value(y).data(), &[0.25; 4]);
        let x = t.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = t.softmax(x);
        let v = t.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[4, 2]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_fn(&[3, 2], |i| i as Real), true);
        let s = t.sum(x);
        t.backward(s, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0; 6]);
        t.backward(s, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0; 6]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_identity() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let xv = Tensor::from_fn(&[5], |i| i as Real - 2.5);
        let x = t.leaf(xv.clone(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let l = t.scale(s, 0.5);
        t.backward(l, &mut store).unwrap();
        assert_eq!(t.grad(x).unwrap(), &xv);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2]), true);
        assert!(t.backward(x, &mut store).is_err());
    }

    #[test]
    fn masked_sse_ignores_unmasked_entries() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::new(vec![3], vec![1.0, 5.0, 2.0]).unwrap());
        let target = Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let l = t.masked_sse(p, &target, &[true, false, true]).unwrap();
        assert_eq!(t.value(l).item(), 5.0);
    }
}
