//! Command implementations behind the `mres` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mres_core::checkpoint::{self, features_file};
use mres_core::corpus::{generate_sample, standardize, CorpusConfig};
use mres_core::diagnostics::{self, expert_sweep, log_grid, GradcheckOptions, GradcheckReport, SweepRow};
use mres_core::flops::{dataset_shapes, encode_cost, CostRow};
use mres_core::model::{FeatureGrid, Model, ModelConfig, Preset};
use mres_core::sample::MultimodalSample;
use mres_core::tensorfile::TensorFile;
use mres_core::train::{pretrain, StepRecord, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mres_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid run configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Corpus seed of the built-in desk corpus when no config file is given.
pub const DESK_CORPUS_SEED: u64 = 0;

pub fn load_corpus(path: Option<&Path>) -> Result<CorpusConfig> {
    Ok(match path {
        Some(p) => CorpusConfig::load(p)?,
        None => CorpusConfig::desk(DESK_CORPUS_SEED)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub preset: Preset,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Run directory receiving `metrics.jsonl` and checkpoints.
    pub out: PathBuf,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Overrides `epochs × steps_per_epoch`; warmup keeps its share.
    pub steps: Option<usize>,
}

impl RunConfig {
    pub fn desk(out: impl Into<PathBuf>) -> Self {
        Self {
            corpus: None,
            preset: Preset::Desk,
            epochs: 20,
            steps_per_epoch: 100,
            base_lr: 1.5e-4,
            warmup_epochs: 2,
            seed: 0,
            out: out.into(),
            checkpoint_every: 500,
            steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.steps == Some(0) {
            return Err(CliError::Config("epochs and steps must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(CliError::Config(format!(
                "warmup epochs ({}) must be fewer than epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        self.validate()?;
        let steps = self.steps.unwrap_or(self.epochs * self.steps_per_epoch);
        let warmup = steps * self.warmup_epochs / self.epochs;
        let cfg = TrainConfig { steps, warmup, base_lr: self.base_lr, seed: self.seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out.join("metrics.jsonl")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.out.join(format!("step-{step:06}.mrt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.out.join("final.mrt")
    }
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub elapsed: Duration,
}

/// Runs pretraining, appending one JSON record per step to the metrics file.
pub fn cmd_pretrain(run: &RunConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<PretrainSummary> {
    let train = run.train_config()?;
    let corpus = load_corpus(run.corpus.as_deref())?;
    std::fs::create_dir_all(&run.out).map_err(io_err(&run.out))?;
    let metrics_path = run.metrics_path();
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);

    let model = Model::new(ModelConfig::preset(run.preset), run.seed)?;
    let mut trainer = Trainer::new(model, train)?;
    let mut checkpoints = Vec::new();
    let extra = |step: usize| serde_json::json!({"step": step, "run": run});
    let start = Instant::now();
    let records = pretrain(&mut trainer, &corpus, |record, trainer| {
        let line = serde_json::to_string(record).map_err(|e| mres_core::Error::Format(e.to_string()))?;
        let write = writeln!(metrics, "{line}").and_then(|_| metrics.flush());
        write.map_err(|source| mres_core::Error::Io { path: metrics_path.clone(), source })?;
        let done = record.step + 1;
        if run.checkpoint_every > 0 && done % run.checkpoint_every == 0 && done < trainer.cfg.steps {
            let path = run.checkpoint_path(done);
            checkpoint::save(&trainer.model, &path, extra(done))?;
            checkpoints.push(path);
        }
        on_step(record);
        Ok(())
    })?;
    let path = run.final_checkpoint();
    checkpoint::save(&trainer.model, &path, extra(trainer.steps_done()))?;
    checkpoints.push(path);
    Ok(PretrainSummary { records, checkpoints, elapsed: start.elapsed() })
}

/// Where `cmd_encode` takes its input from.
#[derive(Clone, Debug, PartialEq)]
pub enum EncodeInput {
    /// A standardized sample file.
    File(PathBuf),
    /// A corpus sample, standardized with the corpus table.
    Generated { corpus: Option<PathBuf>, dataset: Option<String>, seed: u64 },
}

pub fn load_sample(input: &EncodeInput) -> Result<MultimodalSample> {
    match input {
        EncodeInput::File(path) => Ok(MultimodalSample::from_tensor_file(&TensorFile::load(path)?)?),
        EncodeInput::Generated { corpus, dataset, seed } => {
            let corpus = load_corpus(corpus.as_deref())?;
            let spec = match dataset {
                Some(name) => corpus
                    .datasets
                    .iter()
                    .find(|d| &d.name == name)
                    .ok_or_else(|| CliError::Config(format!("corpus has no dataset `{name}`")))?,
                None => &corpus.datasets[0],
            };
            let raw = generate_sample(spec, *seed)?;
            Ok(standardize(&raw, &corpus.table()?)?)
        }
    }
}

/// Unmasked encoding of one sample; writes the feature maps when `out` is set.
pub fn cmd_encode(checkpoint: &Path, input: &EncodeInput, gsd_target: f64, out: Option<&Path>) -> Result<Vec<FeatureGrid>> {
    let model = checkpoint::load(checkpoint)?;
    let sample = load_sample(input)?;
    let grids = model.encode_features(&sample, gsd_target)?;
    if let Some(out) = out {
        let extra = serde_json::json!({"checkpoint": checkpoint, "dataset": sample.dataset});
        features_file(&grids, extra).save(out)?;
    }
    Ok(grids)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopsRow {
    pub dataset: String,
    #[serde(flatten)]
    pub cost: CostRow,
}

/// Cost of encoding each dataset's full modality set over its GSD grid, or
/// over `gsd_targets` when given.
pub fn cmd_flops(corpus: Option<&Path>, preset: Preset, gsd_targets: &[f64]) -> Result<Vec<FlopsRow>> {
    let corpus = load_corpus(corpus)?;
    let cfg = ModelConfig::preset(preset);
    let mut rows = Vec::new();
    for spec in &corpus.datasets {
        let shapes = dataset_shapes(spec);
        let grid = if gsd_targets.is_empty() { spec.gsd_range.grid() } else { gsd_targets.to_vec() };
        for g in grid {
            rows.push(FlopsRow { dataset: spec.name.clone(), cost: encode_cost(&shapes, g, &cfg)? });
        }
    }
    Ok(rows)
}

pub fn flops_csv(rows: &[FlopsRow]) -> String {
    let mut s = String::from("dataset,gsd_target,n_tokens,embed_ops,attn_quadratic_ops,attn_linear_ops,mlp_ops,total_ops\n");
    for r in rows {
        let c = &r.cost;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.dataset, c.gsd_target, c.n_tokens, c.embed_ops, c.attn_quadratic_ops, c.attn_linear_ops, c.mlp_ops, c.total_ops
        ));
    }
    s
}

/// Finite-difference checks on a freshly initialized model. `corrupt` names a
/// module whose analytic gradient is perturbed, as a negative control.
pub fn cmd_gradcheck(preset: Preset, seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let model = Model::new(ModelConfig::preset(preset), seed)?;
    let mut opts = GradcheckOptions::new(seed);
    opts.corrupt = corrupt.map(str::to_string);
    Ok(diagnostics::gradcheck(&model, &opts)?)
}

/// Default ratio grid of the expert sweep.
pub const SWEEP_RANGE: (f64, f64, usize) = (1e-2, 10.0, 61);

/// Gate weights over a log-spaced ratio grid. Without a checkpoint a fresh
/// model of `preset` seeded with `seed` is used.
pub fn cmd_expert_sweep(checkpoint: Option<&Path>, preset: Preset, seed: u64, range: (f64, f64, usize)) -> Result<Vec<SweepRow>> {
    let model = match checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => Model::new(ModelConfig::preset(preset), seed)?,
    };
    let ratios = log_grid(range.0, range.1, range.2)?;
    Ok(expert_sweep(&model, &ratios)?)
}

/// Writes the built-in desk corpus with a normalization table estimated under `seed`.
pub fn cmd_corpus_init(seed: u64, out: &Path) -> Result<CorpusConfig> {
    let corpus = CorpusConfig::desk(seed)?;
    corpus.save(out)?;
    Ok(corpus)
}

/// Writes `text` to `out`, or to stdout without one.
pub fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
