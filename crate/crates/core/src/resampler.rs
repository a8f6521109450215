//! Spatial alignment of latent grids to a target GSD: bilinear resize plus a
//! ratio-gated residual mixture of pointwise channel-mixing experts.

use mres_numerics::layers::Linear;
use mres_numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::encodings::ratio_pe;
use crate::error::{arg_err, dim_err, Result};

/// Rounds `extent · gsd_in / gsd_target` half away from zero, floor 1.
pub fn target_extent(extent: usize, gsd_in: f64, gsd_target: f64) -> Result<usize> {
    check_gsd(gsd_in)?;
    check_gsd(gsd_target)?;
    if extent == 0 {
        return Err(arg_err("raster extent must be positive"));
    }
    Ok(((extent as f64 * gsd_in / gsd_target).round() as usize).max(1))
}

pub fn target_dims(h: usize, w: usize, gsd_in: f64, gsd_target: f64) -> Result<(usize, usize)> {
    Ok((target_extent(h, gsd_in, gsd_target)?, target_extent(w, gsd_in, gsd_target)?))
}

fn check_gsd(g: f64) -> Result<()> {
    if !(g > 0.0 && g.is_finite()) {
        return Err(arg_err(format!("GSD must be positive and finite, got {g}")));
    }
    Ok(())
}

/// Log interpolation ratio. Computed as a difference of logs so that
/// swapping the arguments negates it exactly.
pub fn log_ratio(gsd_in: f64, gsd_target: f64) -> f64 {
    gsd_in.ln() - gsd_target.ln()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResampleSpec {
    pub gsd_in: f64,
    pub gsd_target: f64,
    pub sigma: f64,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ResampleSpec {
    pub fn new(h_in: usize, w_in: usize, gsd_in: f64, gsd_target: f64) -> Result<Self> {
        let (h_out, w_out) = target_dims(h_in, w_in, gsd_in, gsd_target)?;
        Ok(Self { gsd_in, gsd_target, sigma: log_ratio(gsd_in, gsd_target), h_in, w_in, h_out, w_out })
    }

    /// The reverse mapping, from the target grid back to the native one.
    pub fn inverse(&self) -> Self {
        Self {
            gsd_in: self.gsd_target,
            gsd_target: self.gsd_in,
            sigma: -self.sigma,
            h_in: self.h_out,
            w_in: self.w_out,
            h_out: self.h_in,
            w_out: self.w_in,
        }
    }
}

/// Convex weights over the experts.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureWeights {
    pub w: Vec<Real>,
}

impl MixtureWeights {
    pub fn sum(&self) -> Real {
        self.w.iter().sum()
    }
}

/// Gated mixture of `n_conv` bias-free 1×1 convolutions behind a bilinear resize.
#[derive(Clone, Debug)]
pub struct Resampler {
    /// `n_conv × (D·D)`; row `n` is expert `n` stored input-major.
    pub experts: ParamId,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
    pub dim: usize,
    pub n_conv: usize,
}

impl Resampler {
    /// Experts and the final gate layer start at zero, so the module begins
    /// as plain interpolation with uniform weights.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, n_conv: usize) -> Result<Self> {
        if n_conv == 0 || dim < 4 {
            return Err(arg_err(format!("resampler needs experts and width ≥ 4, got {n_conv} and {dim}")));
        }
        let hidden = dim / 4;
        Ok(Self {
            experts: store.add(format!("{name}.experts"), Tensor::zeros(&[n_conv, dim * dim]))?,
            gate_hidden: Linear::new(store, rng, &format!("{name}.gate.fc1"), dim, hidden, true)?,
            gate_out: Linear::zeros(store, &format!("{name}.gate.fc2"), hidden, n_conv, true)?,
            dim,
            n_conv,
        })
    }

    /// Records the gate on the tape, giving a `1 × n_conv` weight row.
    pub fn gate_var(&self, tape: &mut Tape, store: &ParamStore, sigma: f64) -> Result<Var> {
        let pe = ratio_pe(sigma, self.dim)?;
        let x = tape.constant(Tensor::new(vec![1, self.dim], pe)?);
        let h = self.gate_hidden.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let logits = self.gate_out.forward(tape, store, h)?;
        Ok(tape.softmax(logits))
    }

    pub fn gate(&self, store: &ParamStore, sigma: f64) -> Result<MixtureWeights> {
        let mut tape = Tape::new();
        let w = self.gate_var(&mut tape, store, sigma)?;
        Ok(MixtureWeights { w: tape.value(w).data().to_vec() })
    }

    /// `x: T×D×H×W` to channels-last `T × H_out × W_out × D`.
    pub fn resample_channels_last(&self, tape: &mut Tape, store: &ParamStore, x: Var, spec: &ResampleSpec) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.dim || s[2] != spec.h_in || s[3] != spec.w_in {
            return Err(dim_err(format!(
                "resampler input {s:?} for width {} and grid {}x{}",
                self.dim, spec.h_in, spec.w_in
            )));
        }
        let (t, d, ho, wo) = (s[0], self.dim, spec.h_out, spec.w_out);
        let r = tape.resize(x, ho, wo)?;
        let r = tape.permute(r, &[0, 2, 3, 1])?;
        let rows = tape.reshape(r, &[t * ho * wo, d])?;
        let w = self.gate_var(tape, store, spec.sigma)?;
        let experts = tape.param(store, self.experts);
        let mix = tape.matmul(w, experts)?;
        let mix = tape.reshape(mix, &[d, d])?;
        let residual = tape.matmul(rows, mix)?;
        let out = tape.add(rows, residual)?;
        Ok(tape.reshape(out, &[t, ho, wo, d])?)
    }

    /// `x: T×D×H×W` to `T×D×H_out×W_out`.
    pub fn resample(&self, tape: &mut Tape, store: &ParamStore, x: Var, spec: &ResampleSpec) -> Result<Var> {
        let y = self.resample_channels_last(tape, store, x, spec)?;
        Ok(tape.permute(y, &[0, 3, 1, 2])?)
    }

    /// Value-level expert matrices, `n_conv` blocks of `D × D` (input-major).
    pub fn expert_matrix(&self, store: &ParamStore, n: usize) -> Vec<Real> {
        let dd = self.dim * self.dim;
        store.value(self.experts).data()[n * dd..(n + 1) * dd].to_vec()
    }

    pub fn num_params(dim: usize, n_conv: usize) -> usize {
        let hidden = dim / 4;
        n_conv * dim * dim + dim * hidden + hidden + hidden * n_conv + n_conv
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh(dim: usize) -> (ParamStore, Resampler) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = Resampler::new(&mut store, &mut rng, "resampler", dim, 4).unwrap();
        (store, r)
    }

    #[test]
    fn target_dims_examples() {
        assert_eq!(target_dims(64, 64, 10.0, 10.0).unwrap(), (64, 64));
        assert_eq!(target_dims(512, 512, 30.0, 300.0).unwrap(), (51, 51));
        assert_eq!(target_dims(240, 240, 10.0, 160.0).unwrap(), (15, 15));
        assert_eq!(target_dims(5, 3, 1.0, 2.0).unwrap(), (3, 2));
        assert_eq!(target_dims(4, 4, 1.0, 1000.0).unwrap(), (1, 1));
        assert!(target_dims(4, 4, 0.0, 1.0).is_err());
        assert!(target_dims(4, 4, 1.0, -2.0).is_err());
    }

    #[test]
    fn log_ratio_is_antisymmetric() {
        for (a, b) in [(0.2, 3.0), (10.0, 7.0), (30.0, 300.0), (1.5, 1.5)] {
            assert_eq!(log_ratio(a, b), -log_ratio(b, a));
            assert!((log_ratio(a, b) - (a / b).ln()).abs() < 1e-15);
        }
        let s = ResampleSpec::new(10, 10, 10.0, 3.0).unwrap();
        assert_eq!(s.inverse().inverse(), s);
        assert_eq!((s.h_out, s.inverse().h_out), (33, 10));
    }

    #[test]
    fn zero_init_gate_is_uniform() {
        let (store, r) = fresh(16);
        for sigma in [-4.0, 0.0, 0.3, 2.5] {
            assert_eq!(r.gate(&store, sigma).unwrap().w, vec![0.25; 4]);
        }
    }

    #[test]
    fn identity_at_unit_ratio() {
        let (store, r) = fresh(8);
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[2, 8, 3, 4], |i| (i as Real * 0.37).sin());
        let x = tape.constant(xv.clone());
        let spec = ResampleSpec::new(3, 4, 10.0, 10.0).unwrap();
        let y = r.resample(&mut tape, &store, x, &spec).unwrap();
        assert_eq!(tape.value(y), &xv);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (store, r) = fresh(8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 3, 3]));
        let spec = ResampleSpec::new(4, 4, 1.0, 2.0).unwrap();
        assert!(matches!(r.resample(&mut tape, &store, x, &spec), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn parameter_count_closed_form() {
        let (store, _) = fresh(16);
        assert_eq!(store.num_scalars(), Resampler::num_params(16, 4));
    }
}
