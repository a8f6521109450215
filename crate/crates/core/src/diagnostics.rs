//! Gradient verification of every module and the expert-weight sweep.

use std::fmt::Write as _;

use mres_numerics::gradcheck::{input_check_at, param_check, relative_error, GradCheck};
use mres_numerics::layers::is_key_bias;
use mres_numerics::params::trunc_normal;
use mres_numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encodings::{Category, ChannelDescriptor};
use crate::error::{arg_err, Result};
use crate::mae;
use crate::model::Model;
use crate::projector;
use crate::resampler::ResampleSpec;
use crate::sample::{ModalityData, MultimodalSample};
use crate::temporal::TimeStamps;

pub const GRADCHECK_EPS: Real = 1e-5;
pub const GRADCHECK_TOL: Real = 1e-4;
/// Parameters spot-checked through the whole model.
pub const E2E_COORDS: usize = 20;

/// Modules covered by [`gradcheck`], in report order.
pub const GRADCHECK_MODULES: [&str; 8] =
    ["projector", "resampler", "temporal", "temporal_expand", "encoder", "decoder", "resampler_inverse", "end_to_end"];

#[derive(Clone, Debug, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Parameter coordinates sampled per module.
    pub coords_per_module: usize,
    /// Input coordinates sampled per module that has a tensor input.
    pub input_coords: usize,
    /// Scales the analytic gradient of this module by 1.01 before comparing,
    /// to show the check catches a wrong backward pass.
    pub corrupt: Option<String>,
}

impl GradcheckOptions {
    pub fn new(seed: u64) -> Self {
        Self { seed, coords_per_module: 24, input_coords: 12, corrupt: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleReport {
    pub module: String,
    pub checked: usize,
    /// Draws replaced because neither derivative was resolvable.
    pub skipped: usize,
    pub max_rel_error: Real,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub modules: Vec<ModuleReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.modules.iter().all(|m| m.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for m in &self.modules {
            let verdict = if m.passed { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{:<18} {:>3} coords checked, {:>2} draws below resolution  max rel err {:.3e}  {verdict}", m.module, m.checked, m.skipped, m.max_rel_error);
        }
        s
    }
}

/// Coordinates whose gradient is identically zero by construction: attention
/// key biases shift every score of a query equally and cancel in the softmax.
fn structurally_zero(name: &str, len: usize, idx: usize) -> bool {
    is_key_bias(name, len, idx) || (name.starts_with("temporal.") && name.ends_with("key.bias"))
}

/// Replaces all-zero tensors (expert kernels, gate output layer, biases) with
/// small random values. At initialization the gate output layer is zero,
/// which switches off every gradient into the gate's hidden layer.
pub fn randomize_zero_params(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = trunc_normal(rng, p.value.shape(), 0.05);
        }
    }
}

fn sample_coords(store: &ParamStore, prefixes: &[&str], k: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect();
    let mut out = Vec::with_capacity(k);
    let mut tries = 0;
    while out.len() < k && !ids.is_empty() && tries < 100 * k {
        tries += 1;
        let id = *ids.choose(rng).expect("nonempty");
        let p = store.get(id);
        let i = rng.random_range(0..p.value.len());
        if !structurally_zero(&p.name, p.value.len(), i) && !out.contains(&(id, i)) {
            out.push((id, i));
        }
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `Σ probe ⊙ out` with a fixed random probe, so every output coordinate
/// contributes with a distinct weight.
fn probe(tape: &mut Tape, out: Var, probe: &Tensor) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p)?;
    Ok(tape.sum(prod))
}

fn input_coords(len: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..k.min(len)).map(|_| rng.random_range(0..len)).collect()
}

/// Candidates drawn per coordinate kept.
const OVERSAMPLE: usize = 3;

/// A central difference at step 1e-5 in double precision carries an
/// absolute error of roughly `1e-11·|loss|` from rounding. Coordinates whose
/// derivative is below this fraction of the loss cannot be resolved to a
/// relative error of 1e-4 and are replaced by other draws. The test is on
/// both derivatives, so a spurious analytic gradient is still caught.
pub const RESOLUTION: Real = 1e-6;

fn keep_resolved(g: GradCheck, loss: Real, k: usize, skipped: &mut usize) -> GradCheck {
    let floor = RESOLUTION * loss.abs().max(1.0);
    let mut pairs = Vec::with_capacity(k);
    for (a, n) in g.pairs {
        if pairs.len() == k {
            break;
        }
        if a.abs().max(n.abs()) >= floor {
            pairs.push((a, n));
        } else {
            *skipped += 1;
        }
    }
    GradCheck { pairs }
}

fn params_resolved(
    store: &mut ParamStore,
    prefixes: &[&str],
    k: usize,
    rng: &mut ChaCha8Rng,
    skipped: &mut usize,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let coords = sample_coords(store, prefixes, OVERSAMPLE * k, rng);
    let loss = {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        t.value(l).item()
    };
    let g = param_check(store, &coords, GRADCHECK_EPS, f)?;
    Ok(keep_resolved(g, loss, k, skipped))
}

/// The toy two-modality sample used by the end-to-end check.
pub fn toy_sample(seed: u64) -> Result<MultimodalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let optical = ModalityData::new(
        "optical",
        vec![ChannelDescriptor::optical(490.0)?, ChannelDescriptor::optical(665.0)?, ChannelDescriptor::optical(842.0)?],
        10.0,
        TimeStamps::new(vec![40, 200])?,
        random_tensor(&mut rng, &[2, 3, 4, 4]),
    )?;
    let radar = ModalityData::new(
        "radar",
        vec![ChannelDescriptor::category(Category::VvAsc), ChannelDescriptor::category(Category::VhAsc)],
        20.0,
        TimeStamps::single(120)?,
        random_tensor(&mut rng, &[1, 2, 3, 3]),
    )?;
    Ok(MultimodalSample { dataset: "toy".into(), modalities: vec![optical, radar] })
}

struct Checker<'a> {
    model: &'a Model,
    store: ParamStore,
    rng: ChaCha8Rng,
    opts: &'a GradcheckOptions,
    skipped: usize,
}

impl Checker<'_> {
    fn params(&mut self, prefixes: &[&str], f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> Result<GradCheck> {
        let k = self.opts.coords_per_module;
        params_resolved(&mut self.store, prefixes, k, &mut self.rng, &mut self.skipped, f)
    }

    fn input(&mut self, x: &Tensor, f: impl Fn(&mut Tape, &ParamStore, Var) -> Result<Var>) -> Result<GradCheck> {
        let k = self.opts.input_coords;
        let coords = input_coords(x.len(), OVERSAMPLE * k, &mut self.rng);
        let scale = {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let l = f(&mut t, &self.store, xv)?;
            t.value(l).item()
        };
        let g = input_check_at(&mut self.store, x, &coords, GRADCHECK_EPS, f)?;
        Ok(keep_resolved(g, scale, k, &mut self.skipped))
    }

    fn module(&mut self, name: &str) -> Result<GradCheck> {
        let model = self.model;
        let d = model.cfg.dim();
        let dec = model.cfg.encoder.dec_dim;
        match name {
            "projector" => {
                let x = random_tensor(&mut self.rng, &[2, 3, 2, 2]);
                let p = random_tensor(&mut self.rng, &[2, d, 2, 2]);
                let optical = vec![ChannelDescriptor::optical(560.0)?, ChannelDescriptor::optical(705.0)?, ChannelDescriptor::optical(1610.0)?];
                let radar = vec![ChannelDescriptor::category(Category::VvAsc), ChannelDescriptor::category(Category::HvDesc), ChannelDescriptor::category(Category::VhAsc)];
                let run = |tape: &mut Tape, store: &ParamStore, xv: Var| -> Result<Var> {
                    let mut total = Vec::new();
                    for ch in [&optical, &radar] {
                        let m = model.projectors.build_matrix(tape, store, ch)?;
                        let y = projector::project(tape, xv, &m)?;
                        total.push(probe(tape, y, &p)?);
                    }
                    Ok(tape.add_all(&total)?)
                };
                let xc = x.clone();
                let mut g = self.params(&["projector."], |t, s| {
                    let xv = t.constant(xc.clone());
                    run(t, s, xv)
                })?;
                g.merge(self.input(&x, run)?);
                Ok(g)
            }
            "resampler" | "resampler_inverse" => {
                let r = if name == "resampler" { &model.resampler } else { &model.resampler_inverse };
                let spec = ResampleSpec::new(3, 3, 10.0, 15.0)?;
                let x = random_tensor(&mut self.rng, &[2, d, 3, 3]);
                let p = random_tensor(&mut self.rng, &[2, spec.h_out, spec.w_out, d]);
                let run = |tape: &mut Tape, store: &ParamStore, xv: Var| -> Result<Var> {
                    let y = r.resample_channels_last(tape, store, xv, &spec)?;
                    probe(tape, y, &p)
                };
                let xc = x.clone();
                let prefix = format!("{name}.");
                let mut g = self.params(&[&prefix], |t, s| {
                    let xv = t.constant(xc.clone());
                    run(t, s, xv)
                })?;
                g.merge(self.input(&x, run)?);

                // The gate on its own, with the zero-initialized output layer
                // perturbed so that its hidden layer receives gradient. The
                // ratios span the swept range: at small |σ| the slow
                // frequencies of the ratio encoding are nearly constant and
                // their weights get gradients below the difference noise.
                let mut gated = self.store.clone();
                randomize_zero_params(&mut gated, &mut self.rng);
                let sigmas = [spec.sigma, 0.01f64.ln(), 10f64.ln()];
                let pw = random_tensor(&mut self.rng, &[1, model.cfg.n_conv]);
                let gate_prefix = format!("{name}.gate.");
                let k = self.opts.coords_per_module;
                g.merge(params_resolved(&mut gated, &[&gate_prefix], k, &mut self.rng, &mut self.skipped, |t, s| {
                    let mut parts = Vec::new();
                    for &sigma in &sigmas {
                        let w = r.gate_var(t, s, sigma)?;
                        parts.push(probe(t, w, &pw)?);
                    }
                    Ok(t.add_all(&parts)?)
                })?);
                Ok(g)
            }
            "temporal" => {
                let days = TimeStamps::new(vec![10, 95, 250])?;
                let x = random_tensor(&mut self.rng, &[3, 2, 2, d]);
                let p = random_tensor(&mut self.rng, &[4, d]);
                let run = |tape: &mut Tape, store: &ParamStore, xv: Var| -> Result<Var> {
                    let y = model.temporal.aggregate_channels_last(tape, store, xv, &days)?;
                    probe(tape, y, &p)
                };
                let xc = x.clone();
                let mut g = self.params(&["temporal."], |t, s| {
                    let xv = t.constant(xc.clone());
                    run(t, s, xv)
                })?;
                g.merge(self.input(&x, run)?);
                Ok(g)
            }
            "temporal_expand" => {
                let days = TimeStamps::new(vec![10, 95, 250])?;
                let x = random_tensor(&mut self.rng, &[4, d]);
                let p = random_tensor(&mut self.rng, &[12, d]);
                let run = |tape: &mut Tape, store: &ParamStore, xv: Var| -> Result<Var> {
                    let y = model.expand.expand_rows(tape, store, xv, &days)?;
                    probe(tape, y, &p)
                };
                let xc = x.clone();
                let mut g = self.params(&["temporal_expand."], |t, s| {
                    let xv = t.constant(xc.clone());
                    run(t, s, xv)
                })?;
                g.merge(self.input(&x, run)?);
                Ok(g)
            }
            "encoder" => {
                let plan = mae::mask(8, 0.5, self.opts.seed)?;
                let x = random_tensor(&mut self.rng, &[8, d]);
                let p = random_tensor(&mut self.rng, &[plan.visible.len() + 1, d]);
                let run = |tape: &mut Tape, store: &ParamStore, xv: Var| -> Result<Var> {
                    let y = model.encoder.encode(tape, store, xv, &plan)?;
                    probe(tape, y, &p)
                };
                let xc = x.clone();
                let mut g = self.params(&["encoder."], |t, s| {
                    let xv = t.constant(xc.clone());
                    run(t, s, xv)
                })?;
                g.merge(self.input(&x, run)?);
                Ok(g)
            }
            "decoder" => {
                let plan = mae::mask(8, 0.5, self.opts.seed ^ 1)?;
                let x = random_tensor(&mut self.rng, &[plan.visible.len() + 1, d]);
                let pe = random_tensor(&mut self.rng, &[8, dec]);
                let p = random_tensor(&mut self.rng, &[8, d]);
                let run = |tape: &mut Tape, store: &ParamStore, xv: Var| -> Result<Var> {
                    let y = model.decoder.decode(tape, store, xv, &plan, &pe)?;
                    let y = model.decoder.head.forward(tape, store, y)?;
                    probe(tape, y, &p)
                };
                let xc = x.clone();
                let mut g = self.params(&["decoder."], |t, s| {
                    let xv = t.constant(xc.clone());
                    run(t, s, xv)
                })?;
                g.merge(self.input(&x, run)?);
                Ok(g)
            }
            "end_to_end" => {
                let sample = toy_sample(self.opts.seed)?;
                let gsd = 20.0;
                let seed = self.opts.seed;
                let run = |tape: &mut Tape, store: &ParamStore| -> Result<Var> {
                    Ok(model.forward_with(store, tape, &sample, gsd, seed)?.loss)
                };
                // Only tensors that the toy sample actually reaches.
                let mut tape = Tape::new();
                let loss = run(&mut tape, &self.store)?;
                tape.backward(loss, &mut self.store)?;
                let reached: Vec<String> = self
                    .store
                    .iter()
                    .filter(|(_, p)| p.grad.as_ref().is_some_and(|g| g.max_abs() > 0.0))
                    .map(|(_, p)| p.name.clone())
                    .collect();
                self.store.zero_grad();
                let prefixes: Vec<&str> = reached.iter().map(String::as_str).collect();
                params_resolved(&mut self.store, &prefixes, E2E_COORDS, &mut self.rng, &mut self.skipped, run)
            }
            other => Err(arg_err(format!("no gradient check for module `{other}`"))),
        }
    }
}

/// Central-difference check of every module of `model` at a perturbed
/// copy of its parameters, in double precision.
pub fn gradcheck(model: &Model, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let store = model.store.clone();
    let mut c = Checker { model, store, rng, opts, skipped: 0 };
    let mut modules = Vec::new();
    for name in GRADCHECK_MODULES {
        c.skipped = 0;
        let mut g = c.module(name)?;
        if opts.corrupt.as_deref() == Some(name) {
            for pair in &mut g.pairs {
                pair.0 *= 1.01;
            }
        }
        let max = g.pairs.iter().map(|&(a, n)| relative_error(a, n)).fold(0.0, Real::max);
        modules.push(ModuleReport { module: name.into(), checked: g.pairs.len(), skipped: c.skipped, max_rel_error: max, passed: !g.pairs.is_empty() && max < GRADCHECK_TOL });
    }
    Ok(GradcheckReport { modules })
}

/// `n` interpolation ratios spaced evenly in log scale over `[lo, hi]`,
/// both endpoints included.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi > lo) || n < 2 {
        return Err(arg_err(format!("log grid needs 0 < lo < hi and n ≥ 2, got [{lo}, {hi}] with {n}")));
    }
    let (a, b) = (lo.ln(), hi.ln());
    let mut out: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
    out[0] = lo;
    out[n - 1] = hi;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    /// `gsd_in / gsd_target`.
    pub ratio: f64,
    pub weights: Vec<Real>,
}

/// Gate weights of the encoder-side resampler at each interpolation ratio.
pub fn expert_sweep(model: &Model, ratios: &[f64]) -> Result<Vec<SweepRow>> {
    ratios
        .iter()
        .map(|&ratio| {
            if !(ratio > 0.0 && ratio.is_finite()) {
                return Err(arg_err(format!("ratio must be positive, got {ratio}")));
            }
            let w = model.resampler.gate(&model.store, ratio.ln())?;
            Ok(SweepRow { ratio, weights: w.w })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let n = rows.first().map_or(0, |r| r.weights.len());
    let mut s = String::from("ratio");
    for k in 1..=n {
        let _ = write!(s, ",w_{k}");
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.ratio);
        for w in &r.weights {
            let _ = write!(s, ",{w}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Preset};

    #[test]
    fn log_grid_hits_endpoints() {
        let g = log_grid(1e-2, 10.0, 31).unwrap();
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[30], 10.0);
        assert!((g[10] - 1e-1).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn sweep_rows_are_distributions() {
        let model = Model::new(ModelConfig::preset(Preset::Desk), 3).unwrap();
        let rows = expert_sweep(&model, &log_grid(1e-2, 10.0, 7).unwrap()).unwrap();
        for r in &rows {
            assert!((r.weights.iter().sum::<Real>() - 1.0).abs() < 1e-12);
        }
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("ratio,w_1,w_2,w_3,w_4\n"));
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn structural_zeros_are_recognized() {
        assert!(structurally_zero("encoder.blocks.0.attn.qkv.bias", 9, 4));
        assert!(!structurally_zero("encoder.blocks.0.attn.qkv.bias", 9, 7));
        assert!(structurally_zero("temporal.key.bias", 128, 5));
    }
}
