//! Temporal attention encoder collapsing a time series of latent grids to a
//! single grid, and the expansion block that restores the time axis.

use mres_numerics::layers::{Linear, TransformerBlock};
use mres_numerics::params::trunc_normal;
use mres_numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encodings::day_pe;
use crate::error::{arg_err, dim_err, Result};

/// Acquisition days of year, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u16>", into = "Vec<u16>")]
pub struct TimeStamps {
    days: Vec<u16>,
}

impl TimeStamps {
    pub fn new(days: Vec<u16>) -> Result<Self> {
        if days.is_empty() {
            return Err(arg_err("a time series needs at least one date"));
        }
        if let Some(d) = days.iter().find(|d| !(1..=366).contains(*d)) {
            return Err(arg_err(format!("day of year {d} outside 1..=366")));
        }
        if days.windows(2).any(|p| p[0] >= p[1]) {
            return Err(arg_err(format!("acquisition days must be strictly increasing: {days:?}")));
        }
        Ok(Self { days })
    }

    pub fn single(day: u16) -> Result<Self> {
        Self::new(vec![day])
    }

    pub fn days(&self) -> &[u16] {
        &self.days
    }

    pub fn len(&self) -> usize {
        self.days.len()
    }

    pub fn is_empty(&self) -> bool {
        self.days.is_empty()
    }
}

impl TryFrom<Vec<u16>> for TimeStamps {
    type Error = crate::Error;

    fn try_from(days: Vec<u16>) -> Result<Self> {
        Self::new(days)
    }
}

impl From<TimeStamps> for Vec<u16> {
    fn from(t: TimeStamps) -> Self {
        t.days
    }
}

/// Day encodings tiled over `pixels` series: row `p·T + t` holds `day_pe(days[t])`.
fn tiled_day_pe(days: &[u16], dim: usize, pixels: usize) -> Result<Tensor> {
    let mut per_t = Vec::with_capacity(days.len() * dim);
    for &d in days {
        per_t.extend(day_pe(d, dim)?);
    }
    let mut data = Vec::with_capacity(pixels * per_t.len());
    for _ in 0..pixels {
        data.extend_from_slice(&per_t);
    }
    Ok(Tensor::new(vec![pixels * days.len(), dim], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtaeConfig {
    pub heads: usize,
    pub key_dim: usize,
    /// Attention width as a multiple of `D`.
    pub width_mult: usize,
}

impl Default for LtaeConfig {
    fn default() -> Self {
        Self { heads: 16, key_dim: 8, width_mult: 3 }
    }
}

/// Per-pixel attention with one learned master query per head.
#[derive(Clone, Debug)]
pub struct Ltae {
    pub value: Linear,
    pub key: Linear,
    pub queries: ParamId,
    pub out: Linear,
    pub dim: usize,
    pub cfg: LtaeConfig,
}

impl Ltae {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, cfg: LtaeConfig) -> Result<Self> {
        let width = cfg.width_mult * dim;
        if cfg.heads == 0 || cfg.key_dim == 0 || width % cfg.heads != 0 {
            return Err(arg_err(format!(
                "attention width {width} must split evenly into {} heads",
                cfg.heads
            )));
        }
        Ok(Self {
            value: Linear::new(store, rng, &format!("{name}.value"), dim, width, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), width, cfg.heads * cfg.key_dim, true)?,
            queries: store.add(format!("{name}.queries"), trunc_normal(rng, &[cfg.heads, cfg.key_dim], 0.02))?,
            out: Linear::new(store, rng, &format!("{name}.out"), width, dim, true)?,
            dim,
            cfg,
        })
    }

    /// `rows: (P·T) × D` ordered pixel-major; returns `P × D`.
    pub fn aggregate_rows(&self, tape: &mut Tape, store: &ParamStore, rows: Var, pixels: usize, days: &TimeStamps) -> Result<Var> {
        let t = days.len();
        let s = tape.shape(rows).to_vec();
        if s != [pixels * t, self.dim] {
            return Err(dim_err(format!(
                "temporal input {s:?} for {pixels} pixels, {t} dates, width {}",
                self.dim
            )));
        }
        let pe = tape.constant(tiled_day_pe(days.days(), self.dim, pixels)?);
        let x = tape.add(rows, pe)?;
        self.attend(tape, store, x, pixels, t)
    }

    /// Attention over `(P·T) × D` rows that already carry their day encoding.
    fn attend(&self, tape: &mut Tape, store: &ParamStore, x: Var, pixels: usize, t: usize) -> Result<Var> {
        let v = self.value.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, v)?;
        let q = tape.param(store, self.queries);
        let a = tape.master_query_attention(k, v, q, pixels, t)?;
        Ok(self.out.forward(tape, store, a)?)
    }

    /// Channels-last `T × H × W × D` to `P × D` with `P = H·W` row-major.
    pub fn aggregate_channels_last(&self, tape: &mut Tape, store: &ParamStore, x: Var, days: &TimeStamps) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[0] != days.len() {
            return Err(dim_err(format!("temporal input {s:?} with {} dates", days.len())));
        }
        let pixels = s[1] * s[2];
        let rows = tape.permute(x, &[1, 2, 0, 3])?;
        let rows = tape.reshape(rows, &[pixels * s[0], s[3]])?;
        self.aggregate_rows(tape, store, rows, pixels, days)
    }

    /// `x: T×D×H×W` to `D×H×W`.
    pub fn aggregate(&self, tape: &mut Tape, store: &ParamStore, x: Var, days: &TimeStamps) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[0] != days.len() {
            return Err(dim_err(format!("temporal input {s:?} with {} dates", days.len())));
        }
        let (h, w, d) = (s[2], s[3], s[1]);
        let xl = tape.permute(x, &[0, 2, 3, 1])?;
        let y = self.aggregate_channels_last(tape, store, xl, days)?;
        let y = tape.reshape(y, &[h, w, d])?;
        Ok(tape.permute(y, &[2, 0, 1])?)
    }

    pub fn num_params(dim: usize, cfg: &LtaeConfig) -> usize {
        let width = cfg.width_mult * dim;
        let hk = cfg.heads * cfg.key_dim;
        (dim * width + width) + (width * hk + hk) + hk + (width * dim + dim)
    }
}

/// Replicates a grid over time, adds day encodings and runs one transformer
/// block along the time axis of every pixel.
#[derive(Clone, Debug)]
pub struct TemporalExpand {
    pub block: TransformerBlock,
    pub dim: usize,
}

impl TemporalExpand {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self { block: TransformerBlock::new(store, rng, &format!("{name}.block"), dim, heads, mlp_ratio)?, dim })
    }

    /// `P × D` to `(P·T) × D`, pixel-major.
    pub fn expand_rows(&self, tape: &mut Tape, store: &ParamStore, x: Var, days: &TimeStamps) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(dim_err(format!("expansion input {s:?} for width {}", self.dim)));
        }
        let (pixels, t) = (s[0], days.len());
        let idx: Vec<usize> = (0..pixels * t).map(|i| i / t).collect();
        let rep = tape.gather_rows(x, &idx)?;
        let pe = tape.constant(tiled_day_pe(days.days(), self.dim, pixels)?);
        let rep = tape.add(rep, pe)?;
        Ok(self.block.forward(tape, store, rep, pixels, t)?)
    }

    /// `x: D×H×W` to `T×D×H×W`.
    pub fn expand(&self, tape: &mut Tape, store: &ParamStore, x: Var, days: &TimeStamps) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.dim {
            return Err(dim_err(format!("expansion input {s:?} for width {}", self.dim)));
        }
        let (d, h, w) = (s[0], s[1], s[2]);
        let rows = tape.permute(x, &[1, 2, 0])?;
        let rows = tape.reshape(rows, &[h * w, d])?;
        let y = self.expand_rows(tape, store, rows, days)?;
        let y = tape.reshape(y, &[h, w, days.len(), d])?;
        Ok(tape.permute(y, &[2, 3, 0, 1])?)
    }
}
