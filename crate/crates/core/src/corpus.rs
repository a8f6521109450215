//! Synthetic multimodal corpus: dataset presets, sample generation,
//! per-channel standardization and the per-iteration sampling strategy.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use mres_numerics::{Real, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encodings::{Category, ChannelDescriptor};
use crate::error::{io_err, Error, Result};
use crate::sample::{ModalityData, MultimodalSample};
use crate::temporal::TimeStamps;

/// Central wavelengths (nm) of the 13 Sentinel-2 bands.
pub const S2_WAVELENGTHS: [f64; 13] = [440.0, 490.0, 560.0, 665.0, 705.0, 740.0, 783.0, 842.0, 865.0, 945.0, 1373.0, 1610.0, 2200.0];

/// Samples used to estimate the normalization table.
pub const NORM_SAMPLES: usize = 1000;

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for item `index` under `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn hash_str(parts: &[&str]) -> u64 {
    // FNV-1a, stable across platforms and releases
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for b in p.bytes().chain(std::iter::once(0xff)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    splitmix64(h)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GsdRange {
    pub min: f64,
    pub max: f64,
    pub interval: f64,
}

impl GsdRange {
    /// The discrete grid `{min, min + interval, …, max}`.
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.max - self.min) / self.interval).round() as usize;
        (0..=n).map(|i| self.min + i as f64 * self.interval).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.interval > 0.0) {
            return Err(cfg_err(format!("invalid GSD range {self:?}")));
        }
        let steps = (self.max - self.min) / self.interval;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(cfg_err(format!("GSD interval {} does not divide the range {}..{}", self.interval, self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub channels: Vec<ChannelDescriptor>,
    /// Native GSD in meters.
    pub gsd: f64,
    /// Square tile side in pixels.
    pub size: usize,
    pub temporal: bool,
    pub t_max: usize,
}

impl ModalitySpec {
    pub fn footprint(&self) -> f64 {
        self.gsd * self.size as f64
    }

    /// Wavelength band (meters) of the shared field this sensor resolves.
    pub fn band(&self) -> (f64, f64) {
        (2.0 * self.gsd, 0.75 * self.footprint())
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.name;
        if self.channels.is_empty() {
            return Err(cfg_err(format!("modality `{n}` has no channels")));
        }
        let kind = self.channels[0].kind();
        if self.channels.iter().any(|c| c.kind() != kind) {
            return Err(cfg_err(format!("modality `{n}` mixes channel kinds")));
        }
        if !(self.gsd > 0.0) || self.size == 0 || self.t_max == 0 {
            return Err(cfg_err(format!("modality `{n}` needs positive GSD, size and T_max")));
        }
        if !self.temporal && self.t_max != 1 {
            return Err(cfg_err(format!("single-date modality `{n}` must have T_max = 1")));
        }
        if self.temporal && self.t_max < 2 {
            return Err(cfg_err(format!("temporal modality `{n}` needs T_max ≥ 2")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub gsd_range: GsdRange,
    pub batch_size: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Per-modality inclusion probabilities; absent means every nonempty
    /// subset is equally likely.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inclusion: Option<Vec<f64>>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(cfg_err(format!("dataset `{}` has no modalities", self.name)));
        }
        if self.modalities.len() > 16 {
            return Err(cfg_err(format!("dataset `{}` has too many modalities", self.name)));
        }
        if self.batch_size == 0 {
            return Err(cfg_err(format!("dataset `{}` has zero batch size", self.name)));
        }
        self.gsd_range.validate()?;
        for m in &self.modalities {
            m.validate()?;
        }
        if let Some(p) = &self.inclusion {
            if p.len() != self.modalities.len() || p.iter().any(|q| !(0.0..=1.0).contains(q)) || p.iter().all(|&q| q == 0.0) {
                return Err(cfg_err(format!("dataset `{}`: bad inclusion probabilities {p:?}", self.name)));
            }
        }
        Ok(())
    }

    pub fn modality(&self, name: &str) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|m| m.name == name)
    }
}

fn optical(wavelengths: &[f64]) -> Vec<ChannelDescriptor> {
    wavelengths.iter().map(|&w| ChannelDescriptor::Optical { wavelength_nm: w }).collect()
}

fn categorical(cats: &[Category]) -> Vec<ChannelDescriptor> {
    cats.iter().map(|&c| ChannelDescriptor::category(c)).collect()
}

fn modality(name: &str, channels: Vec<ChannelDescriptor>, gsd: f64, size: usize, t_max: usize) -> ModalitySpec {
    ModalitySpec { name: name.into(), channels, gsd, size, temporal: t_max > 1, t_max }
}

/// Desk-scale stand-ins for the three pretraining datasets.
pub fn desk_datasets() -> Vec<DatasetSpec> {
    let s2_10 = [490.0, 560.0, 665.0, 705.0, 740.0, 783.0, 842.0, 865.0, 1610.0, 2200.0];
    let s2_12 = [440.0, 490.0, 560.0, 665.0, 705.0, 740.0, 783.0, 842.0, 865.0, 945.0, 1610.0, 2200.0];
    use Category::*;
    vec![
        DatasetSpec {
            name: "flair".into(),
            gsd_range: GsdRange { min: 3.0, max: 20.0, interval: 1.0 },
            batch_size: 4,
            modalities: vec![
                modality("aerial", optical(&[665.0, 560.0, 490.0, 842.0]), 0.2, 32, 1),
                modality("s2", optical(&s2_10), 10.0, 10, 4),
                modality("s1", categorical(&[VvAsc, VhAsc]), 10.0, 10, 4),
                modality("dem", categorical(&[Dsm, Dtm]), 0.2, 32, 1),
            ],
            inclusion: None,
        },
        DatasetSpec {
            name: "worldstrat".into(),
            gsd_range: GsdRange { min: 5.0, max: 20.0, interval: 1.0 },
            batch_size: 2,
            modalities: vec![
                modality("spot", optical(&[665.0, 560.0, 490.0, 842.0]), 1.5, 32, 1),
                modality("s2", optical(&s2_12), 10.0, 10, 4),
            ],
            inclusion: None,
        },
        DatasetSpec {
            name: "mmearth".into(),
            gsd_range: GsdRange { min: 20.0, max: 100.0, interval: 10.0 },
            batch_size: 8,
            modalities: vec![
                modality("s2", optical(&S2_WAVELENGTHS), 10.0, 16, 1),
                modality("s1", categorical(&[VvAsc, VhAsc, VvDesc, VhDesc, HhAsc, HvAsc, HhDesc, HvDesc]), 10.0, 16, 1),
                modality("dem", categorical(&[Dtm, Slope]), 10.0, 16, 1),
            ],
            inclusion: None,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub dataset: String,
    pub modality: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per (dataset, modality, channel) mean and standard deviation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalizationTable {
    entries: BTreeMap<(String, String), Vec<ChannelStats>>,
}

impl NormalizationTable {
    pub fn insert(&mut self, dataset: &str, modality: &str, stats: Vec<ChannelStats>) -> Result<()> {
        if let Some(s) = stats.iter().find(|s| !(s.std > 0.0) || !s.mean.is_finite()) {
            return Err(cfg_err(format!("{dataset}/{modality}: invalid channel statistics {s:?}")));
        }
        self.entries.insert((dataset.into(), modality.into()), stats);
        Ok(())
    }

    pub fn get(&self, dataset: &str, modality: &str) -> Result<&[ChannelStats]> {
        self.entries
            .get(&(dataset.to_string(), modality.to_string()))
            .map(|v| v.as_slice())
            .ok_or_else(|| cfg_err(format!("no normalization entry for {dataset}/{modality}")))
    }

    fn stats_for(&self, dataset: &str, m: &ModalityData) -> Result<&[ChannelStats]> {
        let stats = self.get(dataset, &m.name)?;
        if stats.len() != m.c() {
            return Err(cfg_err(format!(
                "{dataset}/{}: {} normalization entries for {} channels",
                m.name,
                stats.len(),
                m.c()
            )));
        }
        Ok(stats)
    }

    pub fn to_entries(&self) -> Vec<NormEntry> {
        self.entries
            .iter()
            .map(|((d, m), s)| NormEntry {
                dataset: d.clone(),
                modality: m.clone(),
                mean: s.iter().map(|c| c.mean).collect(),
                std: s.iter().map(|c| c.std).collect(),
            })
            .collect()
    }

    pub fn from_entries(entries: &[NormEntry]) -> Result<Self> {
        let mut t = Self::default();
        for e in entries {
            if e.mean.len() != e.std.len() {
                return Err(cfg_err(format!("{}/{}: mean and std lengths differ", e.dataset, e.modality)));
            }
            let stats = e.mean.iter().zip(&e.std).map(|(&mean, &std)| ChannelStats { mean, std }).collect();
            t.insert(&e.dataset, &e.modality, stats)?;
        }
        Ok(t)
    }

    /// Mean and std per channel over `n` generated samples of every dataset.
    pub fn estimate(datasets: &[DatasetSpec], base_seed: u64, n: usize) -> Result<Self> {
        let mut t = Self::default();
        for (di, spec) in datasets.iter().enumerate() {
            let mut acc: Vec<Vec<(f64, f64, f64)>> = spec.modalities.iter().map(|m| vec![(0.0, 0.0, 0.0); m.channels.len()]).collect();
            for i in 0..n {
                let s = generate_sample(spec, derive_seed(base_seed ^ ((di as u64) << 32), i as u64))?;
                for (m, a) in s.modalities.iter().zip(acc.iter_mut()) {
                    let (t_, c, hw) = (m.t(), m.c(), m.h() * m.w());
                    let d = m.data.data();
                    for ti in 0..t_ {
                        for (ci, slot) in a.iter_mut().enumerate().take(c) {
                            let plane = &d[(ti * c + ci) * hw..(ti * c + ci + 1) * hw];
                            slot.0 += hw as f64;
                            slot.1 += plane.iter().map(|&v| v as f64).sum::<f64>();
                            slot.2 += plane.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                        }
                    }
                }
            }
            for (m, a) in spec.modalities.iter().zip(acc) {
                let stats = a
                    .into_iter()
                    .map(|(cnt, s1, s2)| {
                        let mean = s1 / cnt;
                        ChannelStats { mean, std: (s2 / cnt - mean * mean).max(0.0).sqrt() }
                    })
                    .collect();
                t.insert(&spec.name, &m.name, stats)?;
            }
        }
        Ok(t)
    }
}

fn apply_channels(m: &ModalityData, stats: &[ChannelStats], f: impl Fn(Real, &ChannelStats) -> Real) -> Tensor {
    let (t, c, hw) = (m.t(), m.c(), m.h() * m.w());
    let mut out = m.data.clone();
    let d = out.data_mut();
    for ti in 0..t {
        for (ci, s) in stats.iter().enumerate().take(c) {
            for v in &mut d[(ti * c + ci) * hw..(ti * c + ci + 1) * hw] {
                *v = f(*v, s);
            }
        }
    }
    out
}

/// `(x − mean) / std` per channel.
pub fn standardize(sample: &MultimodalSample, table: &NormalizationTable) -> Result<MultimodalSample> {
    let mut out = sample.clone();
    for m in &mut out.modalities {
        let stats = table.stats_for(&sample.dataset, m)?;
        m.data = apply_channels(m, stats, |v, s| ((v as f64 - s.mean) / s.std) as Real);
    }
    Ok(out)
}

/// `x · std + mean` per channel.
pub fn destandardize(sample: &MultimodalSample, table: &NormalizationTable) -> Result<MultimodalSample> {
    let mut out = sample.clone();
    for m in &mut out.modalities {
        let stats = table.stats_for(&sample.dataset, m)?;
        m.data = apply_channels(m, stats, |v, s| (v as f64 * s.std + s.mean) as Real);
    }
    Ok(out)
}

/// Deterministic physical offset and scale of one channel.
fn channel_affine(dataset: &str, modality: &str, index: usize, ch: &ChannelDescriptor) -> (f64, f64, f64) {
    let h = hash_str(&[dataset, modality, &index.to_string()]);
    let u = |k: u32| ((splitmix64(h ^ k as u64) >> 11) as f64) / (1u64 << 53) as f64;
    let (offset, scale) = match ch {
        ChannelDescriptor::Optical { .. } => (500.0 + 2500.0 * u(1), 100.0 + 900.0 * u(2)),
        ChannelDescriptor::Categorical { category } => match category {
            Category::Dsm | Category::Dtm => (50.0 + 450.0 * u(1), 5.0 + 45.0 * u(2)),
            Category::Slope => (5.0 + 10.0 * u(1), 2.0 + 6.0 * u(2)),
            _ => (-20.0 + 12.0 * u(1), 1.5 + 3.5 * u(2)),
        },
    };
    let loading = 0.75 + 0.2 * u(3);
    (offset, scale, loading)
}

/// One plane wave of a random field.
#[derive(Clone, Copy, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    wavelength: f64,
}

const WAVES_PER_BAND: usize = 8;

fn draw_waves<R: Rng + ?Sized>(rng: &mut R, band: (f64, f64), n: usize) -> Vec<Wave> {
    let (lo, hi) = (band.0.ln(), band.1.max(band.0).ln());
    (0..n)
        .map(|_| {
            let wavelength = (lo + (hi - lo) * rng.random::<f64>()).exp();
            let theta = 2.0 * PI * rng.random::<f64>();
            let k = 2.0 * PI / wavelength;
            Wave { kx: k * theta.cos(), ky: k * theta.sin(), phase: 2.0 * PI * rng.random::<f64>(), wavelength }
        })
        .collect()
}

/// Unit-variance sum of the given waves sampled at the pixel centers of a
/// co-centered `size × size` grid of spacing `gsd`; row-major.
fn sample_waves(waves: &[&Wave], gsd: f64, size: usize) -> Vec<f64> {
    let norm = if waves.is_empty() { 0.0 } else { (2.0 / waves.len() as f64).sqrt() };
    let coord = |i: usize| (i as f64 + 0.5 - size as f64 / 2.0) * gsd;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let y = coord(r);
        for c in 0..size {
            let x = coord(c);
            let v: f64 = waves.iter().map(|w| (w.kx * x + w.ky * y + w.phase).cos()).sum();
            out.push(norm * v);
        }
    }
    out
}

/// Geoaligned synthetic sample. All modalities share one random wave field;
/// each sensor sees the waves inside the band it resolves, plus its own
/// texture and per-pixel noise. Temporal modalities get a seasonal gain.
pub fn generate_sample(spec: &DatasetSpec, seed: u64) -> Result<MultimodalSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shared = Vec::new();
    for m in &spec.modalities {
        shared.extend(draw_waves(&mut rng, m.band(), WAVES_PER_BAND));
    }
    let season_phase = 2.0 * PI * rng.random::<f64>();
    let mut modalities = Vec::with_capacity(spec.modalities.len());
    for m in &spec.modalities {
        let (lo, hi) = m.band();
        let visible: Vec<&Wave> = shared.iter().filter(|w| w.wavelength >= lo && w.wavelength <= hi).collect();
        let field = sample_waves(&visible, m.gsd, m.size);
        let own = draw_waves(&mut rng, m.band(), WAVES_PER_BAND);
        let texture = sample_waves(&own.iter().collect::<Vec<_>>(), m.gsd, m.size);
        let t = if m.temporal { rng.random_range(2..=m.t_max) } else { 1 };
        let mut days: Vec<u16> = sample_indices(&mut rng, 365, t).into_iter().map(|d| d as u16 + 1).collect();
        days.sort_unstable();
        let c = m.channels.len();
        let hw = m.size * m.size;
        let affine: Vec<(f64, f64, f64)> = m.channels.iter().enumerate().map(|(i, ch)| channel_affine(&spec.name, &m.name, i, ch)).collect();
        let mut data = Vec::with_capacity(t * c * hw);
        for &day in &days {
            let gain = if m.temporal { 1.0 + 0.2 * (2.0 * PI * day as f64 / 365.0 + season_phase).sin() } else { 1.0 };
            for &(offset, scale, loading) in &affine {
                let rest = (1.0 - loading * loading).sqrt();
                for p in 0..hw {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let z = loading * gain * field[p] + rest * (0.7 * texture[p] + 0.7 * noise);
                    data.push((offset + scale * z) as Real);
                }
            }
        }
        let data = Tensor::new(vec![t, c, m.size, m.size], data)?;
        modalities.push(ModalityData::new(m.name.clone(), m.channels.clone(), m.gsd, TimeStamps::new(days)?, data)?);
    }
    Ok(MultimodalSample { dataset: spec.name.clone(), modalities })
}

/// What one training iteration draws.
#[derive(Clone, Debug, PartialEq)]
pub struct Iteration {
    pub dataset: usize,
    pub modalities: Vec<usize>,
    pub gsd_target: f64,
}

/// Dataset uniformly, then a nonempty modality subset, then a target GSD
/// uniformly on the dataset's grid.
pub fn sample_iteration(corpus: &[DatasetSpec], seed: u64) -> Result<Iteration> {
    if corpus.is_empty() {
        return Err(cfg_err("empty corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = rng.random_range(0..corpus.len());
    let spec = &corpus[dataset];
    let m = spec.modalities.len();
    if m == 0 {
        return Err(cfg_err(format!("dataset `{}` has no modalities", spec.name)));
    }
    let modalities = match &spec.inclusion {
        None => {
            let mask: u32 = rng.random_range(1..(1u32 << m));
            (0..m).filter(|i| mask >> i & 1 == 1).collect()
        }
        Some(p) => loop {
            let pick: Vec<usize> = (0..m).filter(|&i| rng.random::<f64>() < p[i]).collect();
            if !pick.is_empty() {
                break pick;
            }
        },
    };
    let grid = spec.gsd_range.grid();
    let gsd_target = grid[rng.random_range(0..grid.len())];
    Ok(Iteration { dataset, modalities, gsd_target })
}

/// Corpus configuration file: datasets and the frozen normalization table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub normalization: Vec<NormEntry>,
}

impl CorpusConfig {
    /// The built-in desk corpus with a normalization table estimated from
    /// [`NORM_SAMPLES`] samples per dataset.
    pub fn desk(seed: u64) -> Result<Self> {
        let datasets = desk_datasets();
        let table = NormalizationTable::estimate(&datasets, seed, NORM_SAMPLES)?;
        Ok(Self { seed, datasets, normalization: table.to_entries() })
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(cfg_err("corpus declares no datasets"));
        }
        for d in &self.datasets {
            d.validate()?;
        }
        Ok(())
    }

    pub fn table(&self) -> Result<NormalizationTable> {
        let t = NormalizationTable::from_entries(&self.normalization)?;
        for d in &self.datasets {
            for m in &d.modalities {
                let s = t.get(&d.name, &m.name)?;
                if s.len() != m.channels.len() {
                    return Err(cfg_err(format!("{}/{}: normalization has {} channels, modality {}", d.name, m.name, s.len(), m.channels.len())));
                }
            }
        }
        Ok(t)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| cfg_err(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(io_err(path))
    }
}
