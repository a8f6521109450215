//! The full resolution-adjustable masked autoencoder.

use mres_numerics::{ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encodings::EncodingConfig;
use crate::error::{arg_err, Result};
use crate::mae::{self, Decoder, Encoder, EncoderConfig, LatentGrid, MaskPlan};
use crate::projector::{self, ProjectionMatrix, Projectors};
use crate::resampler::{ResampleSpec, Resampler};
use crate::sample::{ModalityData, MultimodalSample};
use crate::temporal::{Ltae, LtaeConfig, TemporalExpand};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(arg_err(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub n_conv: usize,
    pub ltae: LtaeConfig,
    /// Projector MLP hidden width as a multiple of `D`.
    pub projector_hidden_mult: usize,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let encoder = match p {
            Preset::Desk => EncoderConfig::desk(),
            Preset::Paper => EncoderConfig::paper(),
        };
        Self { encoder, n_conv: 4, ltae: LtaeConfig::default(), projector_hidden_mult: 2 }
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.n_conv == 0 || self.projector_hidden_mult == 0 {
            return Err(arg_err(format!("model configuration has a zero size: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub projectors: Projectors,
    pub resampler: Resampler,
    pub temporal: Ltae,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub expand: TemporalExpand,
    pub resampler_inverse: Resampler,
}

/// Module groups for parameter accounting, by parameter-name prefix.
pub const MODULE_PREFIXES: [(&str, &[&str]); 8] = [
    ("projector.optical", &["projector.optical."]),
    ("projector.radar", &["projector.radar."]),
    ("projector.elevation", &["projector.elevation."]),
    ("projector.categories", &["projector.categories."]),
    ("resampler", &["resampler."]),
    ("temporal", &["temporal."]),
    ("encoder", &["encoder."]),
    ("decoder", &["decoder.", "temporal_expand.", "resampler_inverse."]),
];

/// Per-modality intermediate state of one forward pass.
struct Embedded {
    matrix: ProjectionMatrix,
    spec: ResampleSpec,
    grid: LatentGrid,
}

/// Result of a masked forward pass over one sample.
#[derive(Clone, Debug)]
pub struct Forward {
    pub loss: Var,
    pub empty_mask: bool,
    pub n_tokens: usize,
    pub plan: MaskPlan,
    /// Per-modality reconstruction, `T × C × H × W`.
    pub recon: Vec<Var>,
    pub pixel_masks: Vec<Vec<bool>>,
}

/// One training example: a standardized sample, its target GSD and mask seed.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub sample: MultimodalSample,
    pub gsd_target: f64,
    pub mask_seed: u64,
}

/// Encoder output for one modality on the target grid, `D × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub modality: String,
    pub gsd_target: f64,
    pub data: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.dim();
        let e = &cfg.encoder;
        let projectors = Projectors::new(&mut store, &mut rng, d, cfg.projector_hidden_mult * d)?;
        let resampler = Resampler::new(&mut store, &mut rng, "resampler", d, cfg.n_conv)?;
        let temporal = Ltae::new(&mut store, &mut rng, "temporal", d, cfg.ltae)?;
        let encoder = Encoder::new(&mut store, &mut rng, e)?;
        let decoder = Decoder::new(&mut store, &mut rng, e)?;
        let expand = TemporalExpand::new(&mut store, &mut rng, "temporal_expand", d, e.heads, e.mlp_ratio)?;
        let resampler_inverse = Resampler::new(&mut store, &mut rng, "resampler_inverse", d, cfg.n_conv)?;
        Ok(Self { cfg, store, projectors, resampler, temporal, encoder, decoder, expand, resampler_inverse })
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig::new(self.cfg.dim())
    }

    pub fn decoder_encoding(&self) -> EncodingConfig {
        EncodingConfig::new(self.cfg.encoder.dec_dim)
    }

    /// Parameter counts per module group, in [`MODULE_PREFIXES`] order.
    pub fn module_counts(&self) -> Vec<(&'static str, usize)> {
        MODULE_PREFIXES
            .iter()
            .map(|(name, prefixes)| (*name, prefixes.iter().map(|p| self.store.count_prefix(p)).sum()))
            .collect()
    }

    /// Projection, resampling and temporal aggregation of one modality.
    fn embed(&self, store: &ParamStore, tape: &mut Tape, m: &ModalityData, gsd_target: f64) -> Result<Embedded> {
        let matrix = self.projectors.build_matrix(tape, store, &m.channels)?;
        let x = tape.constant(m.data.clone());
        let y = projector::project(tape, x, &matrix)?;
        let spec = ResampleSpec::new(m.h(), m.w(), m.gsd, gsd_target)?;
        let r = self.resampler.resample_channels_last(tape, store, y, &spec)?;
        let rows = self.temporal.aggregate_channels_last(tape, store, r, &m.days)?;
        let grid = LatentGrid { rows, h: spec.h_out, w: spec.w_out, gsd_target };
        Ok(Embedded { matrix, spec, grid })
    }

    /// Temporal expansion, inverse resampling and channel reconstruction of
    /// one modality's `P × D` grid tokens.
    fn reconstruct(&self, store: &ParamStore, tape: &mut Tape, tokens: Var, m: &ModalityData, e: &Embedded) -> Result<Var> {
        let (ht, wt, t, d) = (e.spec.h_out, e.spec.w_out, m.t(), self.cfg.dim());
        let y = self.expand.expand_rows(tape, store, tokens, &m.days)?;
        let y = tape.reshape(y, &[ht, wt, t, d])?;
        let y = tape.permute(y, &[2, 3, 0, 1])?;
        let y = self.resampler_inverse.resample_channels_last(tape, store, y, &e.spec.inverse())?;
        projector::reconstruct_channels_last(tape, y, &e.matrix)
    }

    fn check_sample(sample: &MultimodalSample, gsd_target: f64) -> Result<()> {
        if sample.modalities.is_empty() {
            return Err(arg_err("sample has no modalities"));
        }
        if !(gsd_target > 0.0 && gsd_target.is_finite()) {
            return Err(arg_err(format!("target GSD must be positive, got {gsd_target}")));
        }
        Ok(())
    }

    /// Masked autoencoding pass with its loss, recorded on `tape`.
    pub fn forward(&self, tape: &mut Tape, sample: &MultimodalSample, gsd_target: f64, mask_seed: u64) -> Result<Forward> {
        self.forward_with(&self.store, tape, sample, gsd_target, mask_seed)
    }

    /// [`Model::forward`] reading parameters from `store` instead of the
    /// model's own, which must share its layout.
    pub fn forward_with(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        sample: &MultimodalSample,
        gsd_target: f64,
        mask_seed: u64,
    ) -> Result<Forward> {
        Self::check_sample(sample, gsd_target)?;
        let embedded = sample
            .modalities
            .iter()
            .map(|m| self.embed(store, tape, m, gsd_target))
            .collect::<Result<Vec<_>>>()?;
        let grids: Vec<LatentGrid> = embedded.iter().map(|e| e.grid).collect();
        let seq = mae::tokenize(tape, &grids, &self.encoding())?;
        let plan = mae::mask(seq.len(), self.cfg.encoder.mask_ratio, mask_seed)?;
        let encoded = self.encoder.encode(tape, store, seq.tokens, &plan)?;
        let pe = mae::sequence_pe(&seq.grids, gsd_target, &self.decoder_encoding())?;
        let decoded = self.decoder.decode(tape, store, encoded, &plan, &pe)?;
        let out = self.decoder.head.forward(tape, store, decoded)?;
        let per_modality = mae::detokenize(tape, out, &seq.grids)?;

        let flags = plan.flags();
        let offsets = seq.offsets();
        let mut recon = Vec::with_capacity(sample.modalities.len());
        let mut pixel_masks = Vec::with_capacity(sample.modalities.len());
        for (((m, e), &tokens), &o) in sample.modalities.iter().zip(&embedded).zip(&per_modality).zip(&offsets) {
            recon.push(self.reconstruct(store, tape, tokens, m, e)?);
            let (ht, wt) = (e.spec.h_out, e.spec.w_out);
            pixel_masks.push(mae::pixel_mask(m.h(), m.w(), ht, wt, &flags[o..o + ht * wt])?);
        }
        let targets: Vec<Tensor> = sample.modalities.iter().map(|m| m.data.clone()).collect();
        let l = mae::masked_loss(tape, &recon, &targets, &pixel_masks)?;
        Ok(Forward { loss: l.loss, empty_mask: l.empty_mask, n_tokens: seq.len(), plan, recon, pixel_masks })
    }

    /// Mean masked loss over a batch; all items share one tape.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &[BatchItem]) -> Result<(Var, Vec<Forward>)> {
        if batch.is_empty() {
            return Err(arg_err("empty batch"));
        }
        let fwd = batch
            .iter()
            .map(|b| self.forward(tape, &b.sample, b.gsd_target, b.mask_seed))
            .collect::<Result<Vec<_>>>()?;
        let losses: Vec<Var> = fwd.iter().map(|f| f.loss).collect();
        let total = tape.add_all(&losses)?;
        Ok((tape.div(total, batch.len() as Real), fwd))
    }

    /// Unmasked encoding: per-modality encoder features on the target grid.
    pub fn encode_features(&self, sample: &MultimodalSample, gsd_target: f64) -> Result<Vec<FeatureGrid>> {
        Self::check_sample(sample, gsd_target)?;
        let mut tape = Tape::new();
        let store = &self.store;
        let embedded = sample
            .modalities
            .iter()
            .map(|m| self.embed(store, &mut tape, m, gsd_target))
            .collect::<Result<Vec<_>>>()?;
        let grids: Vec<LatentGrid> = embedded.iter().map(|e| e.grid).collect();
        let seq = mae::tokenize(&mut tape, &grids, &self.encoding())?;
        let plan = MaskPlan::none(seq.len());
        let encoded = self.encoder.encode(&mut tape, store, seq.tokens, &plan)?;
        let d = self.cfg.dim();
        let enc = tape.value(encoded).data();
        let mut out = Vec::with_capacity(grids.len());
        for ((m, &(h, w)), o) in sample.modalities.iter().zip(&seq.grids).zip(seq.offsets()) {
            // row 0 is CLS
            let rows = &enc[(1 + o) * d..(1 + o + h * w) * d];
            let data = Tensor::from_fn(&[d, h, w], |i| rows[(i % (h * w)) * d + i / (h * w)]);
            out.push(FeatureGrid { modality: m.name.clone(), gsd_target, data });
        }
        Ok(out)
    }
}
