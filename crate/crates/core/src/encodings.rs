//! Sinusoidal encodings of physical quantities and the learned embeddings of
//! non-optical channel categories.

use std::fmt;
use std::str::FromStr;

use mres_numerics::params::trunc_normal;
use mres_numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

pub const PE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Optical,
    Radar,
    Elevation,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 3] = [ChannelKind::Optical, ChannelKind::Radar, ChannelKind::Elevation];

    pub fn name(self) -> &'static str {
        match self {
            ChannelKind::Optical => "optical",
            ChannelKind::Radar => "radar",
            ChannelKind::Elevation => "elevation",
        }
    }
}

/// Non-optical channel identities with a learned embedding each.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "VV-asc")]
    VvAsc,
    #[serde(rename = "VH-asc")]
    VhAsc,
    #[serde(rename = "HH-asc")]
    HhAsc,
    #[serde(rename = "HV-asc")]
    HvAsc,
    #[serde(rename = "VV-desc")]
    VvDesc,
    #[serde(rename = "VH-desc")]
    VhDesc,
    #[serde(rename = "HH-desc")]
    HhDesc,
    #[serde(rename = "HV-desc")]
    HvDesc,
    #[serde(rename = "DSM")]
    Dsm,
    #[serde(rename = "DTM")]
    Dtm,
    #[serde(rename = "slope")]
    Slope,
}

impl Category {
    pub const ALL: [Category; 11] = [
        Category::VvAsc,
        Category::VhAsc,
        Category::HhAsc,
        Category::HvAsc,
        Category::VvDesc,
        Category::VhDesc,
        Category::HhDesc,
        Category::HvDesc,
        Category::Dsm,
        Category::Dtm,
        Category::Slope,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn kind(self) -> ChannelKind {
        match self {
            Category::Dsm | Category::Dtm | Category::Slope => ChannelKind::Elevation,
            _ => ChannelKind::Radar,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Category::VvAsc => "VV-asc",
            Category::VhAsc => "VH-asc",
            Category::HhAsc => "HH-asc",
            Category::HvAsc => "HV-asc",
            Category::VvDesc => "VV-desc",
            Category::VhDesc => "VH-desc",
            Category::HhDesc => "HH-desc",
            Category::HvDesc => "HV-desc",
            Category::Dsm => "DSM",
            Category::Dtm => "DTM",
            Category::Slope => "slope",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Registry(s.to_string()))
    }
}

/// Physical identity of one input channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelDescriptor {
    /// Central wavelength in nanometers.
    Optical { wavelength_nm: f64 },
    Categorical { category: Category },
}

impl ChannelDescriptor {
    pub fn optical(wavelength_nm: f64) -> Result<Self> {
        if !(wavelength_nm > 0.0 && wavelength_nm.is_finite()) {
            return Err(arg_err(format!("wavelength must be positive, got {wavelength_nm}")));
        }
        Ok(Self::Optical { wavelength_nm })
    }

    pub fn category(category: Category) -> Self {
        Self::Categorical { category }
    }

    pub fn kind(&self) -> ChannelKind {
        match self {
            Self::Optical { .. } => ChannelKind::Optical,
            Self::Categorical { category } => category.kind(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Embedding width; even, and divisible by 4 for the 2-D grid encoding.
    pub dim: usize,
    pub base: f64,
    /// Reference length `G` in meters dividing the target GSD.
    pub gsd_ref: f64,
}

impl EncodingConfig {
    pub fn new(dim: usize) -> Self {
        Self { dim, base: PE_BASE, gsd_ref: 1.0 }
    }
}

/// Interleaved encoding: component `2k` is `sin(v / base^(2k/D))`, `2k+1` the cosine.
pub fn sinusoid(value: f64, dim: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let arg = value / PE_BASE.powf(2.0 * k as f64 / dim as f64);
        out.push(arg.sin() as Real);
        out.push(arg.cos() as Real);
    }
    out
}

fn check_even(dim: usize) -> Result<()> {
    if dim == 0 || dim % 2 != 0 {
        return Err(arg_err(format!("encoding width must be positive and even, got {dim}")));
    }
    Ok(())
}

pub fn wavelength_pe(wavelength_nm: f64, dim: usize) -> Result<Vec<Real>> {
    check_even(dim)?;
    if !(wavelength_nm > 0.0) {
        return Err(arg_err(format!("wavelength must be positive, got {wavelength_nm}")));
    }
    Ok(sinusoid(wavelength_nm, dim))
}

/// Encoding of the log interpolation ratio `σ = ln(gsd_in / gsd_target)`.
pub fn ratio_pe(sigma: f64, dim: usize) -> Result<Vec<Real>> {
    check_even(dim)?;
    if !sigma.is_finite() {
        return Err(arg_err(format!("interpolation ratio must be finite, got {sigma}")));
    }
    Ok(sinusoid(sigma, dim))
}

/// Encoding of an acquisition day of year (1..=366).
pub fn day_pe(day: u16, dim: usize) -> Result<Vec<Real>> {
    check_even(dim)?;
    if !(1..=366).contains(&day) {
        return Err(arg_err(format!("day of year must lie in 1..=366, got {day}")));
    }
    Ok(sinusoid(day as f64, dim))
}

/// Angular frequency of index `k` in one axis of the grid encoding, whose
/// per-axis width is `D/2`.
fn grid_omega(k: usize, cfg: &EncodingConfig) -> f64 {
    let quarter = (cfg.dim / 4) as f64;
    1.0 / cfg.base.powf(k as f64 / quarter)
}

/// Sinusoid argument of the grid encoding at position `pos` and frequency index `k`.
pub fn gsd_pe_argument(pos: usize, k: usize, gsd_target: f64, cfg: &EncodingConfig) -> f64 {
    let scale = gsd_target / cfg.gsd_ref;
    (scale * pos as f64) * grid_omega(k, cfg)
}

/// GSD-scaled 2-D encoding, `H × W × D`. The first `D/2` components encode the
/// column position, the last `D/2` the row position; each half holds `D/4`
/// sines followed by the matching `D/4` cosines.
pub fn gsd_pe_2d(h: usize, w: usize, gsd_target: f64, cfg: &EncodingConfig) -> Result<Tensor> {
    let d = cfg.dim;
    if d == 0 || d % 4 != 0 {
        return Err(arg_err(format!("grid encoding width must be divisible by 4, got {d}")));
    }
    if h == 0 || w == 0 || !(gsd_target > 0.0) || !(cfg.gsd_ref > 0.0) {
        return Err(arg_err(format!(
            "grid encoding needs positive extents and GSD, got {h}x{w} at {gsd_target} m"
        )));
    }
    let quarter = d / 4;
    let axis = |pos: usize| -> Vec<Real> {
        let args: Vec<f64> = (0..quarter).map(|k| gsd_pe_argument(pos, k, gsd_target, cfg)).collect();
        args.iter().map(|a| a.sin() as Real).chain(args.iter().map(|a| a.cos() as Real)).collect()
    };
    let cols: Vec<Vec<Real>> = (0..w).map(axis).collect();
    let rows: Vec<Vec<Real>> = (0..h).map(axis).collect();
    let mut data = Vec::with_capacity(h * w * d);
    for row in &rows {
        for col in &cols {
            data.extend_from_slice(col);
            data.extend_from_slice(row);
        }
    }
    Ok(Tensor::new(vec![h, w, d], data)?)
}

/// Learned `D`-wide embedding per [`Category`], one row each.
#[derive(Clone, Debug)]
pub struct CategoryEmbeddings {
    pub table: ParamId,
    pub dim: usize,
}

impl CategoryEmbeddings {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Result<Self> {
        let table = store.add(format!("{name}.weight"), trunc_normal(rng, &[Category::ALL.len(), dim], 0.02))?;
        Ok(Self { table, dim })
    }

    /// Rows for `categories`, recorded on the tape so they receive gradients.
    pub fn lookup(&self, tape: &mut Tape, store: &ParamStore, categories: &[Category]) -> Result<Var> {
        let t = tape.param(store, self.table);
        let idx: Vec<usize> = categories.iter().map(|c| c.index()).collect();
        Ok(tape.gather_rows(t, &idx)?)
    }

    pub fn row(&self, store: &ParamStore, category: Category) -> Vec<Real> {
        let d = self.dim;
        store.value(self.table).data()[category.index() * d..(category.index() + 1) * d].to_vec()
    }
}
