// Wengert tape: every op appends a node holding its output value and enough
// saved state to run its vector-Jacobian product. Nodes are appended in
// topological order, so backward is a single reverse sweep.

use std::collections::HashMap;

use crate::attention;
use crate::error::{arg_err, Result};
use crate::gemm::{mm_nt_acc, mm_tn_acc};
use crate::resize::{resize_adjoint, AxisResampler};
use crate::{ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
}

pub(crate) enum Op {
    Leaf { requires_grad: bool },
    Param(ParamId),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Real),
    Divide(Var, Real),
    Sum(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, inp: usize, out: usize },
    Reshape(Var),
    Permute { x: Var, inverse: Vec<usize> },
    ConcatRows(Vec<Var>),
    GatherRows { src: Var, idx: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<Real>, rstd: Vec<Real> },
    Gelu(Var),
    Softmax(Var),
    Resize { x: Var, rh: AxisResampler, rw: AxisResampler },
    SelfAttention { qkv: Var, cfg: attention::AttnShape, probs: Vec<Real> },
    MasterQuery { keys: Var, values: Var, queries: Var, cfg: attention::AttnShape, probs: Vec<Real> },
    MaskedSse { pred: Var, weighted_diff: Vec<Real> },
}

/// Records a forward computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Tensor>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Gradients are kept for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { requires_grad })
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(&v.0)
    }

    /// Propagates d`loss` to every reachable parameter (into `store`) and
    /// `requires_grad` leaf (kept on the tape). Gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(arg_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let Tape { nodes, leaf_grads } = self;
        let mut grads: Vec<Option<Vec<Real>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut sink = Sink { nodes, grads: &mut grads };
            match &node.op {
                Op::Leaf { requires_grad } => {
                    if *requires_grad {
                        leaf_grads
                            .entry(i)
                            .or_insert_with(|| Tensor::zeros(node.value.shape()))
                            .add_assign(&g);
                    }
                }
                Op::Param(id) => store.grad_mut(*id).add_assign(&g),
                Op::Add(a, b) => {
                    sink.add(*a, &g);
                    sink.add(*b, &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    let ga: Vec<Real> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<Real> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    sink.put(*a, ga);
                    sink.put(*b, gb);
                }
                Op::Scale(a, c) => sink.put(*a, g.iter().map(|v| v * c).collect()),
                Op::Divide(a, d) => sink.put(*a, g.iter().map(|v| v / d).collect()),
                Op::Sum(a) => sink.put(*a, vec![g[0]; nodes[a.0].value.len()]),
                Op::Matmul { a, b, m, k, n } => {
                    if sink.wants(*a) {
                        let mut ga = vec![0.0; m * k];
                        mm_nt_acc(&g, nodes[b.0].value.data(), &mut ga, *m, *n, *k);
                        sink.put(*a, ga);
                    }
                    if sink.wants(*b) {
                        let mut gb = vec![0.0; k * n];
                        mm_tn_acc(nodes[a.0].value.data(), &g, &mut gb, *k, *m, *n);
                        sink.put(*b, gb);
                    }
                }
                Op::Linear { x, w, b, rows, inp, out } => {
                    if sink.wants(*x) {
                        let mut gx = vec![0.0; rows * inp];
                        mm_nt_acc(&g, nodes[w.0].value.data(), &mut gx, *rows, *out, *inp);
                        sink.put(*x, gx);
                    }
                    if sink.wants(*w) {
                        let mut gw = vec![0.0; inp * out];
                        mm_tn_acc(nodes[x.0].value.data(), &g, &mut gw, *inp, *rows, *out);
                        sink.put(*w, gw);
                    }
                    if let Some(b) = b {
                        if sink.wants(*b) {
                            let mut gb = vec![0.0; *out];
                            for row in g.chunks_exact(*out) {
                                for (acc, v) in gb.iter_mut().zip(row) {
                                    *acc += v;
                                }
                            }
                            sink.put(*b, gb);
                        }
                    }
                }
                Op::Reshape(a) => sink.put(*a, g),
                Op::Permute { x, inverse } => {
                    let gt = Tensor::new(node.value.shape().to_vec(), g)?;
                    sink.put(*x, gt.permute(inverse)?.into_data());
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        sink.add(*p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::GatherRows { src, idx } => {
                    if sink.wants(*src) {
                        let sv = &nodes[src.0].value;
                        let width = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                        let mut gs = vec![0.0; sv.len()];
                        for (r, &s) in idx.iter().enumerate() {
                            let dst = &mut gs[s * width..(s + 1) * width];
                            for (d, v) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                                *d += v;
                            }
                        }
                        sink.put(*src, gs);
                    }
                }
                Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                    layer_norm_backward(&mut sink, &g, *x, *gamma, *beta, mean, rstd);
                }
                Op::Gelu(x) => {
                    let xv = nodes[x.0].value.data();
                    sink.put(*x, g.iter().zip(xv).map(|(g, &x)| g * gelu_grad(x)).collect());
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap_or(&1);
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
                        let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    sink.put(*x, gx);
                }
                Op::Resize { x, rh, rw } => {
                    let planes = nodes[x.0].value.len() / (rh.in_len() * rw.in_len());
                    sink.put(*x, resize_adjoint(&g, planes, rh, rw));
                }
                Op::SelfAttention { qkv, cfg, probs } => {
                    let gqkv = attention::self_attention_backward(nodes[qkv.0].value.data(), probs, &g, cfg);
                    sink.put(*qkv, gqkv);
                }
                Op::MasterQuery { keys, values, queries, cfg, probs } => {
                    let (gk, gv, gq) = attention::master_query_backward(
                        nodes[keys.0].value.data(),
                        nodes[values.0].value.data(),
                        nodes[queries.0].value.data(),
                        probs,
                        &g,
                        cfg,
                    );
                    sink.put(*keys, gk);
                    sink.put(*values, gv);
                    sink.put(*queries, gq);
                }
                Op::MaskedSse { pred, weighted_diff } => {
                    sink.put(*pred, weighted_diff.iter().map(|d| 2.0 * g[0] * d).collect());
                }
            }
        }
        Ok(())
    }
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } | Op::Param(_) => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Divide(a, _) | Op::Sum(a) | Op::Reshape(a) | Op::Gelu(a) | Op::Softmax(a) => vec![*a],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Permute { x, .. } | Op::Resize { x, .. } => vec![*x],
            Op::ConcatRows(parts) => parts.clone(),
            Op::GatherRows { src, .. } => vec![*src],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SelfAttention { qkv, .. } => vec![*qkv],
            Op::MasterQuery { keys, values, queries, .. } => vec![*keys, *values, *queries],
            Op::MaskedSse { pred, .. } => vec![*pred],
        }
    }
}

/// Gradient accumulator for the inputs of the node being differentiated.
struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<Real>>>,
}

impl Sink<'_> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn put(&mut self, v: Var, g: Vec<Real>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn add(&mut self, v: Var, g: &[Real]) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn layer_norm_backward(sink: &mut Sink<'_>, g: &[Real], x: Var, gamma: Var, beta: Var, mean: &[Real], rstd: &[Real]) {
    let xv = sink.nodes[x.0].value.data();
    let gam = sink.nodes[gamma.0].value.data();
    let d = gam.len();
    let mut gx = vec![0.0; xv.len()];
    let mut gg = vec![0.0; d];
    let mut gb = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for (r, (xr, gr)) in xv.chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for j in 0..d {
            xhat[j] = (xr[j] - mean[r]) * rstd[r];
            gxhat[j] = gr[j] * gam[j];
            gg[j] += gr[j] * xhat[j];
            gb[j] += gr[j];
            s1 += gxhat[j];
            s2 += gxhat[j] * xhat[j];
        }
        let (m1, m2) = (s1 / d as Real, s2 / d as Real);
        let out = &mut gx[r * d..(r + 1) * d];
        for j in 0..d {
            out[j] = rstd[r] * (gxhat[j] - m1 - xhat[j] * m2);
        }
    }
    sink.put(x, gx);
    sink.put(gamma, gg);
    sink.put(beta, gb);
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

pub(crate) fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: Real) -> Real {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
