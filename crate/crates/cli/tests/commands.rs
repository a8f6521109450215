use std::path::Path;
use std::process::Command;

use mres_cli::*;
use mres_core::checkpoint;
use mres_core::encodings::ChannelDescriptor;
use mres_core::model::{Model, ModelConfig, Preset};
use mres_core::sample::{ModalityData, MultimodalSample};
use mres_core::temporal::TimeStamps;
use mres_core::tensorfile::TensorFile;
use mres_core::train::StepRecord;
use mres_core::Error;
use mres_numerics::Tensor;

fn fresh_checkpoint(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("fresh.mrt");
    let model = Model::new(ModelConfig::preset(Preset::Desk), 5).unwrap();
    checkpoint::save(&model, &path, serde_json::Value::Null).unwrap();
    path
}

fn short_run(out: &Path) -> RunConfig {
    RunConfig { steps: Some(10), checkpoint_every: 4, ..RunConfig::desk(out) }
}

#[test]
fn pretrain_metrics_are_deterministic_and_parseable() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_pretrain(&short_run(&dir.path().join("a")), |_| {}).unwrap();
    let b = cmd_pretrain(&short_run(&dir.path().join("b")), |_| {}).unwrap();
    let ma = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let mb = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(ma, mb);

    let text = String::from_utf8(ma).unwrap();
    let parsed: Vec<StepRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, a.records);
    assert_eq!(parsed.len(), 10);
    assert_eq!(parsed[0].lr, 0.0);
    assert!(parsed.iter().all(|r| r.loss.is_finite() && r.n_tokens > 0 && !r.modalities.is_empty()));

    let names: Vec<_> = a.checkpoints.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
    assert_eq!(names, ["step-000004.mrt", "step-000008.mrt", "final.mrt"]);
    let fa = TensorFile::load(&a.checkpoints[2]).unwrap();
    let fb = TensorFile::load(&b.checkpoints[2]).unwrap();
    assert_eq!(fa.tensors, fb.tensors);
}

#[test]
fn paper_schedule_reaches_base_rate_after_warmup() {
    let run = RunConfig { preset: Preset::Paper, epochs: 100, warmup_epochs: 20, steps_per_epoch: 10, ..RunConfig::desk("run") };
    let t = run.train_config().unwrap();
    assert_eq!(t.lr(0), 0.0);
    assert_eq!(t.lr(t.warmup), 1.5e-4);
}

#[test]
fn startup_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("run");
    let err = cmd_pretrain(&short_run(&out), |_| {}).unwrap_err();
    assert!(err.to_string().contains(out.to_str().unwrap()), "{err}");

    let missing = dir.path().join("missing.toml");
    let run = RunConfig { corpus: Some(missing.clone()), ..short_run(dir.path()) };
    let err = cmd_pretrain(&run, |_| {}).unwrap_err();
    assert!(err.to_string().contains(missing.to_str().unwrap()), "{err}");
}

#[test]
fn encode_halving_target_doubles_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(dir.path());
    let input = EncodeInput::Generated { corpus: None, dataset: Some("flair".into()), seed: 3 };
    let out = dir.path().join("f.mrt");
    let coarse = cmd_encode(&ckpt, &input, 8.0, Some(&out)).unwrap();
    let fine = cmd_encode(&ckpt, &input, 4.0, None).unwrap();
    for (c, f) in coarse.iter().zip(&fine) {
        let (sc, sf) = (c.data.shape(), f.data.shape());
        assert_eq!(sc[0], 192);
        // Sides double up to the rounding of the target extent.
        assert!(sf[1].abs_diff(2 * sc[1]) <= 1 && sf[2].abs_diff(2 * sc[2]) <= 1, "{}: {sc:?} {sf:?}", c.modality);
    }
    let file = TensorFile::load(&out).unwrap();
    assert_eq!(file.tensors.len(), coarse.len());
    for g in &coarse {
        let t = file.get(&format!("features.{}", g.modality)).unwrap();
        assert_eq!(t.shape(), g.data.shape());
    }
    let again = cmd_encode(&ckpt, &input, 8.0, None).unwrap();
    assert_eq!(again, coarse);
}

#[test]
fn encode_reads_sample_files() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(dir.path());
    let data = Tensor::new(vec![2, 1, 24, 24], (0..1152).map(|i| ((i % 37) as f64 / 32.0) - 0.5).collect()).unwrap();
    let m = ModalityData::new("s2", vec![ChannelDescriptor::optical(665.0).unwrap()], 10.0, TimeStamps::new(vec![30, 90]).unwrap(), data).unwrap();
    let sample = MultimodalSample { dataset: "custom".into(), modalities: vec![m] };
    let path = dir.path().join("sample.mrt");
    sample.to_tensor_file().save(&path).unwrap();
    assert_eq!(MultimodalSample::from_tensor_file(&TensorFile::load(&path).unwrap()).unwrap(), sample);

    let grids = cmd_encode(&ckpt, &EncodeInput::File(path), 16.0, None).unwrap();
    // 24 px at 10 m is 240 m of ground; at 16 m per token that is 15 tokens.
    assert_eq!(grids[0].data.shape(), &[192, 15, 15]);
}

#[test]
fn encode_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = fresh_checkpoint(dir.path());
    let mut file = TensorFile::load(&ckpt).unwrap();
    file.tensors.retain(|(n, _)| n != "resampler.experts");
    file.save(&ckpt).unwrap();
    let input = EncodeInput::Generated { corpus: None, dataset: None, seed: 0 };
    match cmd_encode(&ckpt, &input, 10.0, None) {
        Err(CliError::Core(Error::Manifest(diff))) => assert!(diff.contains("resampler.experts"), "{diff}"),
        other => panic!("expected a manifest diff, got {other:?}"),
    }
}

#[test]
fn flops_sweep_rows() {
    let rows = cmd_flops(None, Preset::Desk, &[]).unwrap();
    let flair: Vec<_> = rows.iter().filter(|r| r.dataset == "flair").collect();
    assert_eq!(flair.len(), 18);
    let rows = cmd_flops(None, Preset::Desk, &[10.0, 5.0]).unwrap();
    for pair in rows.chunks(2) {
        let (a, b) = (&pair[0].cost, &pair[1].cost);
        // Rounding can keep tiny footprints at one token, but the attention
        // term always follows N².
        assert_eq!(b.attn_quadratic_ops * a.n_tokens * a.n_tokens, a.attn_quadratic_ops * b.n_tokens * b.n_tokens);
    }
    let quadrupled: Vec<_> = rows.chunks(2).filter(|p| p[1].cost.n_tokens == 4 * p[0].cost.n_tokens).collect();
    assert_eq!(quadrupled.len(), 2, "worldstrat and mmearth quadruple");
    assert!(quadrupled.iter().all(|p| p[1].cost.attn_quadratic_ops == 16 * p[0].cost.attn_quadratic_ops));
}

#[test]
fn fresh_gate_sweep_is_uniform_with_endpoints() {
    let rows = cmd_expert_sweep(None, Preset::Desk, 0, SWEEP_RANGE).unwrap();
    assert_eq!(rows.len(), SWEEP_RANGE.2);
    assert_eq!(rows[0].ratio, 1e-2);
    assert_eq!(rows.last().unwrap().ratio, 10.0);
    assert!(rows.iter().all(|r| r.weights == [0.25; 4]));
}

#[test]
fn corpus_init_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.toml");
    let written = cmd_corpus_init(7, &path).unwrap();
    assert_eq!(load_corpus(Some(&path)).unwrap(), written);
}

#[test]
fn gradcheck_binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_mres");
    let ok = Command::new(bin).args(["gradcheck", "--seed", "1"]).output().unwrap();
    let report = String::from_utf8_lossy(&ok.stdout);
    assert!(ok.status.success(), "{report}");
    assert!(report.contains("end_to_end") && report.contains("max rel err"));
    let bad = Command::new(bin).args(["gradcheck", "--seed", "1", "--corrupt", "encoder"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn binary_reports_bad_arguments() {
    let bin = env!("CARGO_BIN_EXE_mres");
    let out = Command::new(bin).args(["encode", "--checkpoint", "/nonexistent/ckpt.mrt", "--gsd-target", "10"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/ckpt.mrt"));
}
