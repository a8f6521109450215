//! Parameterized building blocks. Each holds parameter ids into a
//! [`ParamStore`] and records its forward pass onto a [`Tape`].

use rand::Rng;

use crate::error::Result;
use crate::params::{trunc_normal, xavier_uniform};
use crate::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub const LN_EPS: Real = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        let w = xavier_uniform(rng, inp, out);
        Self::with_weight(store, name, w, bias)
    }

    /// Zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Result<Self> {
        Self::with_weight(store, name, Tensor::zeros(&[inp, out]), bias)
    }

    /// Truncated-normal weight with the given std, zero bias.
    pub fn normal<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, inp: usize, out: usize, std: f64, bias: bool) -> Result<Self> {
        let w = trunc_normal(rng, &[inp, out], std);
        Self::with_weight(store, name, w, bias)
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Result<Self> {
        let (inp, out) = (w.shape()[0], w.shape()[1]);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out]))?) } else { None };
        Ok(Self { weight, bias, inp, out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn num_params(&self) -> usize {
        self.inp * self.out + if self.bias.is_some() { self.out } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.weight"), Tensor::full(&[dim], 1.0))?,
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two affine maps with a GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, inp: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), inp, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, out, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), dim, dim, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), dim, mlp_ratio * dim, dim)?,
            heads,
        })
    }

    /// `x` is `(batch·seq) × dim`; attention stays within each sequence.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, batch: usize, seq: usize) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let qkv = self.qkv.forward(tape, store, h)?;
        let a = tape.self_attention(qkv, batch, seq, self.heads)?;
        let a = self.proj.forward(tape, store, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, store, x)?;
        let h = self.mlp.forward(tape, store, h)?;
        tape.add(x, h)
    }

    pub fn num_params(dim: usize, mlp_ratio: usize) -> usize {
        let hidden = dim * mlp_ratio;
        4 * dim + (dim * 3 * dim + 3 * dim) + (dim * dim + dim) + (dim * hidden + hidden) + (hidden * dim + dim)
    }
}

/// True for coordinates of an attention key bias. Softmax is invariant to a
/// per-row shift of the scores, so their gradient is identically zero and a
/// central difference only measures roundoff.
pub fn is_key_bias(name: &str, len: usize, index: usize) -> bool {
    name.ends_with("attn.qkv.bias") && index >= len / 3 && index < 2 * len / 3
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_parameter_count_matches_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        TransformerBlock::new(&mut store, &mut rng, "b", 16, 4, 4).unwrap();
        assert_eq!(store.num_scalars(), TransformerBlock::num_params(16, 4));
        // ViT-Base block
        assert_eq!(TransformerBlock::num_params(768, 4), 7_087_872);
    }

    #[test]
    fn single_token_attention_is_value_path() {
        // With one token, attention weights are 1 and the block reduces to
        // x + proj(v) followed by the MLP residual.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blk = TransformerBlock::new(&mut store, &mut rng, "b", 8, 2, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 8], |i| i as Real * 0.1));
        let y = blk.forward(&mut tape, &store, x, 1, 1).unwrap();
        assert!(tape.value(y).all_finite());
        assert_eq!(tape.shape(y), &[1, 8]);
    }
}
