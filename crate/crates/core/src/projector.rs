//! Channel-conditioned projection between raw channels and the latent width.
//!
//! Each channel's physical encoding (wavelength sinusoid or learned category
//! row) goes through the MLP of its modality type to give one row of the
//! `C × D` projection matrix.

use mres_numerics::layers::Mlp;
use mres_numerics::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::encodings::{wavelength_pe, Category, CategoryEmbeddings, ChannelDescriptor, ChannelKind};
use crate::error::{arg_err, dim_err, Result};

/// Projection matrix recorded on a tape, with the channels it was built for.
#[derive(Clone, Debug)]
pub struct ProjectionMatrix {
    pub matrix: Var,
    pub channels: Vec<ChannelDescriptor>,
}

impl ProjectionMatrix {
    pub fn rows(&self) -> usize {
        self.channels.len()
    }
}

/// The three per-type projectors plus the shared category embedding table.
#[derive(Clone, Debug)]
pub struct Projectors {
    pub optical: Mlp,
    pub radar: Mlp,
    pub elevation: Mlp,
    pub categories: CategoryEmbeddings,
    pub dim: usize,
}

impl Projectors {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            optical: Mlp::new(store, rng, "projector.optical.mlp", dim, hidden, dim)?,
            radar: Mlp::new(store, rng, "projector.radar.mlp", dim, hidden, dim)?,
            elevation: Mlp::new(store, rng, "projector.elevation.mlp", dim, hidden, dim)?,
            categories: CategoryEmbeddings::new(store, rng, "projector.categories", dim)?,
            dim,
        })
    }

    pub fn mlp(&self, kind: ChannelKind) -> &Mlp {
        match kind {
            ChannelKind::Optical => &self.optical,
            ChannelKind::Radar => &self.radar,
            ChannelKind::Elevation => &self.elevation,
        }
    }

    /// Builds `M` for one modality; all channels must share a kind.
    pub fn build_matrix(&self, tape: &mut Tape, store: &ParamStore, channels: &[ChannelDescriptor]) -> Result<ProjectionMatrix> {
        let first = channels.first().ok_or_else(|| arg_err("projection needs at least one channel"))?;
        let kind = first.kind();
        if let Some(other) = channels.iter().find(|c| c.kind() != kind) {
            return Err(arg_err(format!(
                "mixed channel kinds in one modality: {} and {}",
                kind.name(),
                other.kind().name()
            )));
        }
        let enc = match kind {
            ChannelKind::Optical => {
                let mut data = Vec::with_capacity(channels.len() * self.dim);
                for c in channels {
                    if let ChannelDescriptor::Optical { wavelength_nm } = c {
                        data.extend(wavelength_pe(*wavelength_nm, self.dim)?);
                    }
                }
                tape.constant(Tensor::new(vec![channels.len(), self.dim], data)?)
            }
            _ => {
                let cats: Vec<Category> = channels
                    .iter()
                    .filter_map(|c| match c {
                        ChannelDescriptor::Categorical { category } => Some(*category),
                        ChannelDescriptor::Optical { .. } => None,
                    })
                    .collect();
                self.categories.lookup(tape, store, &cats)?
            }
        };
        let matrix = self.mlp(kind).forward(tape, store, enc)?;
        Ok(ProjectionMatrix { matrix, channels: channels.to_vec() })
    }
}

fn check_4d(shape: &[usize], what: &str) -> Result<()> {
    if shape.len() != 4 {
        return Err(dim_err(format!("{what} must be T×C×H×W, got {shape:?}")));
    }
    Ok(())
}

/// Per-pixel channel projection, channels-last output `T × H × W × D`.
pub fn project_channels_last(tape: &mut Tape, x: Var, m: &ProjectionMatrix) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    check_4d(&s, "projector input")?;
    let ms = tape.shape(m.matrix).to_vec();
    if s[1] != ms[0] {
        return Err(dim_err(format!(
            "input has {} channels but the projection matrix has {} rows",
            s[1], ms[0]
        )));
    }
    let (t, c, h, w, d) = (s[0], s[1], s[2], s[3], ms[1]);
    let xl = tape.permute(x, &[0, 2, 3, 1])?;
    let xl = tape.reshape(xl, &[t * h * w, c])?;
    let y = tape.matmul(xl, m.matrix)?;
    Ok(tape.reshape(y, &[t, h, w, d])?)
}

/// `x: T×C×H×W` to `T×D×H×W` through `M: C×D`.
pub fn project(tape: &mut Tape, x: Var, m: &ProjectionMatrix) -> Result<Var> {
    let y = project_channels_last(tape, x, m)?;
    Ok(tape.permute(y, &[0, 3, 1, 2])?)
}

/// Channels-last latents `T × H × W × D` back to `T × C × H × W` through `Mᵀ`.
pub fn reconstruct_channels_last(tape: &mut Tape, y: Var, m: &ProjectionMatrix) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    let ms = tape.shape(m.matrix).to_vec();
    if s.len() != 4 || s[3] != ms[1] {
        return Err(dim_err(format!(
            "latent {s:?} does not match projection matrix {ms:?}"
        )));
    }
    let (t, h, w, d, c) = (s[0], s[1], s[2], s[3], ms[0]);
    let mt = tape.permute(m.matrix, &[1, 0])?;
    let yl = tape.reshape(y, &[t * h * w, d])?;
    let x = tape.matmul(yl, mt)?;
    let x = tape.reshape(x, &[t, h, w, c])?;
    Ok(tape.permute(x, &[0, 3, 1, 2])?)
}

/// `y: T×D×H×W` to `T×C×H×W` through `Mᵀ`.
pub fn reconstruct_channels(tape: &mut Tape, y: Var, m: &ProjectionMatrix) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    check_4d(&s, "latent")?;
    let yl = tape.permute(y, &[0, 2, 3, 1])?;
    reconstruct_channels_last(tape, yl, m)
}
