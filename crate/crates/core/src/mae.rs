//! Token assembly, random masking, the transformer encoder and decoder, and
//! the masked reconstruction loss.

use mres_numerics::layers::{LayerNorm, Linear, TransformerBlock};
use mres_numerics::params::trunc_normal;
use mres_numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encodings::{gsd_pe_2d, EncodingConfig};
use crate::error::{arg_err, dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self { dim: 768, depth: 12, heads: 12, dec_dim: 512, dec_depth: 8, dec_heads: 16, mlp_ratio: 4, mask_ratio: 0.75 }
    }

    pub fn desk() -> Self {
        Self { dim: 192, depth: 4, heads: 4, dec_dim: 96, dec_depth: 2, dec_heads: 4, mlp_ratio: 4, mask_ratio: 0.75 }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.dim, self.depth, self.heads, self.dec_dim, self.dec_depth, self.dec_heads, self.mlp_ratio];
        if counts.contains(&0) {
            return Err(arg_err(format!("encoder configuration has a zero size: {self:?}")));
        }
        if self.dim % self.heads != 0 || self.dec_dim % self.dec_heads != 0 {
            return Err(arg_err(format!("embedding widths must divide by their head counts: {self:?}")));
        }
        if self.dim % 4 != 0 || self.dec_dim % 4 != 0 {
            return Err(arg_err(format!("embedding widths must divide by 4: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(arg_err(format!("mask ratio must lie in [0, 1), got {}", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenMeta {
    pub modality: usize,
    pub h: usize,
    pub w: usize,
    pub gsd_target: f64,
}

/// A latent grid at the target GSD, channels-last rows `(H·W) × D`.
#[derive(Clone, Copy, Debug)]
pub struct LatentGrid {
    pub rows: Var,
    pub h: usize,
    pub w: usize,
    pub gsd_target: f64,
}

#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `N × D`
    pub tokens: Var,
    pub meta: Vec<TokenMeta>,
    /// Grid extents per modality, in sequence order.
    pub grids: Vec<(usize, usize)>,
    pub gsd_target: f64,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// First token index of each modality.
    pub fn offsets(&self) -> Vec<usize> {
        grid_offsets(&self.grids)
    }
}

pub fn grid_offsets(grids: &[(usize, usize)]) -> Vec<usize> {
    let mut acc = 0;
    grids
        .iter()
        .map(|(h, w)| {
            let o = acc;
            acc += h * w;
            o
        })
        .collect()
}

pub fn token_count(grids: &[(usize, usize)]) -> usize {
    grids.iter().map(|(h, w)| h * w).sum()
}

/// Concatenated grid encodings for a sequence layout, `N × D`.
pub fn sequence_pe(grids: &[(usize, usize)], gsd_target: f64, cfg: &EncodingConfig) -> Result<Tensor> {
    let mut data = Vec::with_capacity(token_count(grids) * cfg.dim);
    for &(h, w) in grids {
        data.extend(gsd_pe_2d(h, w, gsd_target, cfg)?.into_data());
    }
    Ok(Tensor::new(vec![token_count(grids), cfg.dim], data)?)
}

/// Adds the grid encoding to every latent grid and concatenates them row-major.
pub fn tokenize(tape: &mut Tape, latents: &[LatentGrid], cfg: &EncodingConfig) -> Result<TokenSequence> {
    let first = latents.first().ok_or_else(|| arg_err("no latent grids to tokenize"))?;
    let gsd_target = first.gsd_target;
    if let Some(other) = latents.iter().find(|l| l.gsd_target != gsd_target) {
        return Err(arg_err(format!(
            "latent grids at different target GSDs: {gsd_target} and {}",
            other.gsd_target
        )));
    }
    let mut parts = Vec::with_capacity(latents.len());
    let mut meta = Vec::new();
    let mut grids = Vec::with_capacity(latents.len());
    for (m, l) in latents.iter().enumerate() {
        let s = tape.shape(l.rows).to_vec();
        if s != [l.h * l.w, cfg.dim] {
            return Err(dim_err(format!(
                "latent grid {m} has shape {s:?}, expected {}x{}",
                l.h * l.w,
                cfg.dim
            )));
        }
        let pe = gsd_pe_2d(l.h, l.w, gsd_target, cfg)?.reshape(&[l.h * l.w, cfg.dim])?;
        let pe = tape.constant(pe);
        parts.push(tape.add(l.rows, pe)?);
        for h in 0..l.h {
            for w in 0..l.w {
                meta.push(TokenMeta { modality: m, h, w, gsd_target });
            }
        }
        grids.push((l.h, l.w));
    }
    let tokens = tape.concat_rows(&parts)?;
    Ok(TokenSequence { tokens, meta, grids, gsd_target })
}

/// Splits `N × D'` token rows back into one `(H·W) × D'` block per modality.
pub fn detokenize(tape: &mut Tape, tokens: Var, grids: &[(usize, usize)]) -> Result<Vec<Var>> {
    let n = token_count(grids);
    if tape.shape(tokens).first() != Some(&n) {
        return Err(dim_err(format!(
            "{:?} tokens for grids totalling {n}",
            tape.shape(tokens)
        )));
    }
    let offsets = grid_offsets(grids);
    grids
        .iter()
        .zip(offsets)
        .map(|(&(h, w), o)| {
            let idx: Vec<usize> = (o..o + h * w).collect();
            Ok(tape.gather_rows(tokens, &idx)?)
        })
        .collect()
}

/// Disjoint split of `0..n` into visible and masked token indices, both sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub n: usize,
}

impl MaskPlan {
    /// Per-token flag, true where masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n];
        for &i in &self.masked {
            f[i] = true;
        }
        f
    }

    pub fn none(n: usize) -> Self {
        Self { visible: (0..n).collect(), masked: Vec::new(), n }
    }
}

pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).floor() as usize
}

/// Masks `floor(ratio·n)` tokens chosen uniformly without replacement.
pub fn mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(arg_err(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let k = masked_count(n, ratio);
    let mut masked = perm[..k].to_vec();
    let mut visible = perm[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { visible, masked, n })
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cls: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub dim: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        let cls = store.add("encoder.cls", trunc_normal(rng, &[1, cfg.dim], 0.02))?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, rng, &format!("encoder.blocks.{i}"), cfg.dim, cfg.heads, cfg.mlp_ratio))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", cfg.dim)?;
        Ok(Self { cls, blocks, norm, dim: cfg.dim })
    }

    /// CLS followed by the visible tokens through the blocks; `(V+1) × D`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, plan: &MaskPlan) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 2 || s[0] != plan.n || s[1] != self.dim {
            return Err(arg_err(format!(
                "mask plan over {} tokens applied to a {s:?} sequence",
                plan.n
            )));
        }
        let vis = tape.gather_rows(tokens, &plan.visible)?;
        let cls = tape.param(store, self.cls);
        let mut x = tape.concat_rows(&[cls, vis])?;
        let seq = plan.visible.len() + 1;
        for b in &self.blocks {
            x = b.forward(tape, store, x, 1, seq)?;
        }
        Ok(self.norm.forward(tape, store, x)?)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub dim: usize,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &EncoderConfig) -> Result<Self> {
        let embed = Linear::new(store, rng, "decoder.embed", cfg.dim, cfg.dec_dim, true)?;
        let mask_token = store.add("decoder.mask_token", trunc_normal(rng, &[1, cfg.dec_dim], 0.02))?;
        let blocks = (0..cfg.dec_depth)
            .map(|i| {
                TransformerBlock::new(store, rng, &format!("decoder.blocks.{i}"), cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let norm = LayerNorm::new(store, "decoder.norm", cfg.dec_dim)?;
        let head = Linear::new(store, rng, "decoder.head", cfg.dec_dim, cfg.dim, true)?;
        Ok(Self { embed, mask_token, blocks, norm, head, dim: cfg.dec_dim })
    }

    /// Decoder input rows `(N+1) × D_dec`: CLS, then per token its projected
    /// encoding or the mask token, plus the grid encoding (zero for CLS).
    pub fn assemble(&self, tape: &mut Tape, store: &ParamStore, encoded: Var, plan: &MaskPlan, pe: &Tensor) -> Result<Var> {
        let v = plan.visible.len();
        if tape.shape(encoded).first() != Some(&(v + 1)) {
            return Err(dim_err(format!(
                "{:?} encoded rows for {v} visible tokens",
                tape.shape(encoded)
            )));
        }
        if pe.shape() != [plan.n, self.dim] {
            return Err(dim_err(format!("decoder encoding {:?} for {} tokens", pe.shape(), plan.n)));
        }
        let e = self.embed.forward(tape, store, encoded)?;
        let mt = tape.param(store, self.mask_token);
        let pool = tape.concat_rows(&[e, mt])?;
        let mut idx = vec![v + 1; plan.n + 1];
        idx[0] = 0;
        for (k, &i) in plan.visible.iter().enumerate() {
            idx[i + 1] = k + 1;
        }
        let full = tape.gather_rows(pool, &idx)?;
        let mut pe_data = vec![0.0; self.dim];
        pe_data.extend_from_slice(pe.data());
        let pe = tape.constant(Tensor::new(vec![plan.n + 1, self.dim], pe_data)?);
        Ok(tape.add(full, pe)?)
    }

    /// Grid tokens after the decoder blocks, CLS removed; `N × D_dec`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, encoded: Var, plan: &MaskPlan, pe: &Tensor) -> Result<Var> {
        let mut x = self.assemble(tape, store, encoded, plan, pe)?;
        for b in &self.blocks {
            x = b.forward(tape, store, x, 1, plan.n + 1)?;
        }
        let x = self.norm.forward(tape, store, x)?;
        let idx: Vec<usize> = (1..=plan.n).collect();
        Ok(tape.gather_rows(x, &idx)?)
    }
}

/// Index of the target cell whose center is nearest to native pixel `i`.
pub fn footprint_cell(i: usize, native: usize, target: usize) -> usize {
    let c = ((i as f64 + 0.5) * target as f64 / native as f64).floor() as usize;
    c.min(target - 1)
}

/// Native `H × W` pixel flags from the `Ht × Wt` token flags of one modality.
pub fn pixel_mask(h: usize, w: usize, ht: usize, wt: usize, token_masked: &[bool]) -> Result<Vec<bool>> {
    if token_masked.len() != ht * wt || ht == 0 || wt == 0 {
        return Err(dim_err(format!("{} token flags for a {ht}x{wt} grid", token_masked.len())));
    }
    let cols: Vec<usize> = (0..w).map(|x| footprint_cell(x, w, wt)).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let r = footprint_cell(y, h, ht);
        out.extend(cols.iter().map(|&c| token_masked[r * wt + c]));
    }
    Ok(out)
}

/// Loss of one sample and whether any pixel was masked at all.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub loss: Var,
    pub empty_mask: bool,
}

/// Per modality the squared error over masked pixels, averaged over dates
/// and channels and divided by `H·W`; then averaged over modalities.
pub fn masked_loss(tape: &mut Tape, recon: &[Var], targets: &[Tensor], pixel_masks: &[Vec<bool>]) -> Result<MaskedLoss> {
    if recon.is_empty() || recon.len() != targets.len() || recon.len() != pixel_masks.len() {
        return Err(arg_err(format!(
            "{} reconstructions, {} targets, {} masks",
            recon.len(),
            targets.len(),
            pixel_masks.len()
        )));
    }
    let mut terms = Vec::with_capacity(recon.len());
    let mut any = false;
    for ((&r, t), pm) in recon.iter().zip(targets).zip(pixel_masks) {
        let s = t.shape();
        if s.len() != 4 || pm.len() != s[2] * s[3] {
            return Err(dim_err(format!("pixel mask of {} entries for target {s:?}", pm.len())));
        }
        any |= pm.iter().any(|&m| m);
        let planes = s[0] * s[1];
        let mut full = Vec::with_capacity(planes * pm.len());
        for _ in 0..planes {
            full.extend_from_slice(pm);
        }
        let sse = tape.masked_sse(r, t, &full)?;
        terms.push(tape.div(sse, (planes * s[2] * s[3]) as Real));
    }
    let total = tape.add_all(&terms)?;
    let loss = tape.div(total, terms.len() as Real);
    Ok(MaskedLoss { loss, empty_mask: !any })
}
