//! Pretraining loop: sampling strategy, masked loss, AdamW with warmup-cosine.

use mres_numerics::optim::{warmup_cosine, AdamW, AdamWConfig};
use mres_numerics::Tape;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, generate_sample, sample_iteration, standardize, CorpusConfig, NormalizationTable};
use crate::error::{arg_err, Result};
use crate::model::{BatchItem, Model};

/// Stream tags keeping the per-step random draws independent.
const ITERATION_STREAM: u64 = 0x6974_6572;
const SAMPLE_STREAM: u64 = 0x7361_6d70;
const MASK_STREAM: u64 = 0x6d61_736b;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub warmup: usize,
    pub base_lr: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.warmup >= self.steps {
            return Err(arg_err(format!(
                "need warmup < steps and steps > 0, got warmup {} and steps {}",
                self.warmup, self.steps
            )));
        }
        if !(self.base_lr > 0.0) {
            return Err(arg_err(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        Ok(())
    }

    pub fn lr(&self, step: usize) -> f64 {
        warmup_cosine(step, self.warmup, self.steps, self.base_lr)
    }
}

/// One metrics record per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub dataset: String,
    pub modalities: Vec<String>,
    pub gsd_target: f64,
    pub n_tokens: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    opt: AdamW,
    step: usize,
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub n_tokens: usize,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.store, AdamWConfig::default());
        Ok(Self { model, cfg, opt, step: 0 })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Forward, backward and update on one batch. Parameters are kept
    /// representable in 32 bits so checkpoints reproduce them exactly.
    pub fn step(&mut self, batch: &[BatchItem]) -> Result<StepOutcome> {
        let mut tape = Tape::new();
        let (loss, fwd) = self.model.batch_loss(&mut tape, batch)?;
        let value = tape.value(loss).item();
        tape.backward(loss, &mut self.model.store)?;
        drop(tape);
        let lr = self.cfg.lr(self.step);
        self.opt.step(&mut self.model.store, lr);
        self.model.store.zero_grad();
        self.model.store.round_to_f32();
        self.step += 1;
        Ok(StepOutcome { loss: value, lr, n_tokens: fwd[0].n_tokens })
    }
}

/// The batch drawn at `step`: dataset, modality subset and target GSD from
/// the sampling strategy, then `batch_size` standardized samples.
pub fn pretraining_batch(corpus: &CorpusConfig, table: &NormalizationTable, seed: u64, step: usize) -> Result<(StepRecord, Vec<BatchItem>)> {
    let it = sample_iteration(&corpus.datasets, derive_seed(seed ^ ITERATION_STREAM, step as u64))?;
    let spec = &corpus.datasets[it.dataset];
    let names: Vec<String> = it.modalities.iter().map(|&i| spec.modalities[i].name.clone()).collect();
    let mut items = Vec::with_capacity(spec.batch_size);
    for b in 0..spec.batch_size {
        let index = (step * spec.batch_size + b) as u64;
        let raw = generate_sample(spec, derive_seed(seed ^ SAMPLE_STREAM, index))?;
        let sample = standardize(&raw.subset(&names)?, table)?;
        items.push(BatchItem { sample, gsd_target: it.gsd_target, mask_seed: derive_seed(seed ^ MASK_STREAM, index) });
    }
    let record = StepRecord {
        step,
        dataset: spec.name.clone(),
        modalities: names,
        gsd_target: it.gsd_target,
        n_tokens: 0,
        batch_size: spec.batch_size,
        lr: 0.0,
        loss: 0.0,
    };
    Ok((record, items))
}

/// Runs the remaining steps of `trainer.cfg`, calling `on_step` after each.
pub fn pretrain(
    trainer: &mut Trainer,
    corpus: &CorpusConfig,
    mut on_step: impl FnMut(&StepRecord, &Trainer) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let table = corpus.table()?;
    let mut records = Vec::with_capacity(trainer.cfg.steps);
    while trainer.steps_done() < trainer.cfg.steps {
        let step = trainer.steps_done();
        let (mut record, batch) = pretraining_batch(corpus, &table, trainer.cfg.seed, step)?;
        let out = trainer.step(&batch)?;
        record.loss = out.loss;
        record.lr = out.lr;
        record.n_tokens = out.n_tokens;
        on_step(&record, trainer)?;
        records.push(record);
    }
    Ok(records)
}

/// One sample per `(dataset index, target GSD)` pick with all modalities
/// and fixed mask seeds.
pub fn fixed_batch(corpus: &CorpusConfig, table: &NormalizationTable, picks: &[(usize, f64)], seed: u64) -> Result<Vec<BatchItem>> {
    picks
        .iter()
        .enumerate()
        .map(|(i, &(di, gsd_target))| {
            let spec = corpus
                .datasets
                .get(di)
                .ok_or_else(|| arg_err(format!("corpus has no dataset {di}")))?;
            let raw = generate_sample(spec, derive_seed(seed ^ SAMPLE_STREAM, i as u64))?;
            Ok(BatchItem {
                sample: standardize(&raw, table)?,
                gsd_target,
                mask_seed: derive_seed(seed ^ MASK_STREAM, i as u64),
            })
        })
        .collect()
}

/// Mean of `xs[i-w+1..=i]` for every `i ≥ w-1`.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { steps: 100, warmup: 20, base_lr: 1.5e-4, seed: 0 };
        assert_eq!(cfg.lr(0), 0.0);
        assert_eq!(cfg.lr(20), 1.5e-4);
        assert!(cfg.lr(99) < 1e-6);
        assert!(TrainConfig { warmup: 100, ..cfg }.validate().is_err());
    }

    #[test]
    fn moving_average_windows() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(moving_average(&xs, 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&xs, 5).is_empty());
    }
}
