//! Closed-form operation counts for encoding one tile. One multiply-accumulate
//! counts as two operations.

use serde::Serialize;

use crate::corpus::DatasetSpec;
use crate::error::{arg_err, Result};
use crate::model::ModelConfig;
use crate::resampler::target_dims;

/// Operation counts of one pre-norm transformer block over `n` tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BlockOps {
    /// Scores and weighted values, `4·N²·D`.
    pub attn_quadratic: u64,
    /// Query/key/value and output projections, `8·N·D²`.
    pub attn_linear: u64,
    /// Two MLP layers, `4·r·N·D²`.
    pub mlp: u64,
}

impl BlockOps {
    pub fn total(&self) -> u64 {
        self.attn_quadratic + self.attn_linear + self.mlp
    }
}

pub fn block_ops(n: u64, d: u64, mlp_ratio: u64) -> BlockOps {
    BlockOps { attn_quadratic: 4 * n * n * d, attn_linear: 8 * n * d * d, mlp: 4 * mlp_ratio * n * d * d }
}

/// Raster geometry of one modality as seen by the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModalityShape {
    pub channels: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub gsd: f64,
}

/// Projection, expert mixing and temporal aggregation of one modality.
pub fn embedding_ops(m: &ModalityShape, gsd_target: f64, cfg: &ModelConfig) -> Result<(u64, u64)> {
    let (ht, wt) = target_dims(m.h, m.w, m.gsd, gsd_target)?;
    let d = cfg.dim() as u64;
    let (t, c) = (m.t as u64, m.channels as u64);
    let native = (m.h * m.w) as u64;
    let tokens = (ht * wt) as u64;
    let width = cfg.ltae.width_mult as u64 * d;
    let hk = (cfg.ltae.heads * cfg.ltae.key_dim) as u64;
    let projection = 2 * t * native * c * d;
    let experts = 2 * t * tokens * d * d;
    let temporal = 2 * tokens * (t * (d * width + width * hk) + width * d);
    Ok((tokens, projection + experts + temporal))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub gsd_target: f64,
    pub n_tokens: u64,
    pub embed_ops: u64,
    pub attn_quadratic_ops: u64,
    pub attn_linear_ops: u64,
    pub mlp_ops: u64,
    pub total_ops: u64,
}

/// Cost of an unmasked encoder pass over all tokens of the given modalities.
/// The CLS token is left out so that the attention term is exactly quadratic in N.
pub fn encode_cost(modalities: &[ModalityShape], gsd_target: f64, cfg: &ModelConfig) -> Result<CostRow> {
    if modalities.is_empty() {
        return Err(arg_err("cost of an empty modality set"));
    }
    let mut n = 0;
    let mut embed = 0;
    for m in modalities {
        let (tokens, ops) = embedding_ops(m, gsd_target, cfg)?;
        n += tokens;
        embed += ops;
    }
    let e = &cfg.encoder;
    let b = block_ops(n, e.dim as u64, e.mlp_ratio as u64);
    let depth = e.depth as u64;
    let row = CostRow {
        gsd_target,
        n_tokens: n,
        embed_ops: embed,
        attn_quadratic_ops: depth * b.attn_quadratic,
        attn_linear_ops: depth * b.attn_linear,
        mlp_ops: depth * b.mlp,
        total_ops: embed + depth * b.total(),
    };
    Ok(row)
}

/// Shapes of a dataset's full modality set, temporal ones at `T_max`.
pub fn dataset_shapes(spec: &DatasetSpec) -> Vec<ModalityShape> {
    spec.modalities
        .iter()
        .map(|m| ModalityShape { channels: m.channels.len(), t: m.t_max, h: m.size, w: m.size, gsd: m.gsd })
        .collect()
}

pub fn sweep(shapes: &[ModalityShape], gsds: &[f64], cfg: &ModelConfig) -> Result<Vec<CostRow>> {
    gsds.iter().map(|&g| encode_cost(shapes, g, cfg)).collect()
}
