mod common;

use common::{synthetic_corpus, tiny_manifest};
use relora::checkpoint::{load_model, Archive};
use relora::config::Mode;
use relora::data::Corpus;
use relora::model::{ModelConfig, Transformer};
use relora::tensor::DType;
use relora::trainer::{
    self, evaluate, train_full, train_relora, Event, Session, FINAL_CHECKPOINT, METRICS_HEADER, WARM_START_CHECKPOINT,
};

fn corpus() -> Corpus {
    synthetic_corpus(200_000, 1)
}

fn weights(path: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let a = Archive::load(path).unwrap();
    a.buffers
        .iter()
        .filter(|(k, _)| k.starts_with("param/"))
        .map(|(k, b)| (k.clone(), b.bytes.clone()))
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let c = corpus();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = train_relora(&tiny_manifest(Mode::Relora, d1.path()), &c).unwrap();
    let b = train_relora(&tiny_manifest(Mode::Relora, d2.path()), &c).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.final_eval, b.final_eval);
    assert_eq!(weights(&d1.path().join(FINAL_CHECKPOINT)), weights(&d2.path().join(FINAL_CHECKPOINT)));
    let m1 = std::fs::read_to_string(d1.path().join("metrics.csv")).unwrap();
    let m2 = std::fs::read_to_string(d2.path().join("metrics.csv")).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn resets_happen_on_schedule() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let out = train_relora(&tiny_manifest(Mode::Relora, d.path()), &c).unwrap();
    let steps: Vec<usize> = out.log.resets.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![40, 60, 80]);
    for (k, reset) in out.log.resets.iter().enumerate() {
        assert_eq!(reset.merges.len(), 14);
        assert!(reset.merges.iter().all(|(_, m)| m.merged_count == k + 1 && m.delta_norm > 0.0));
        let prune = reset.prune.as_ref().expect("optimizer reset is enabled");
        // only low-rank factor states are pruned
        assert_eq!(prune.entries.len(), 28);
        assert!(prune.entries.iter().all(|e| e.name.ends_with("lora_a") || e.name.ends_with("lora_b")));
        assert!(d.path().join(format!("reset_{:03}.ckpt", k + 1)).exists());
    }
    assert_eq!(out.log.events(Event::WarmStartEnd), vec![20]);
    assert_eq!(out.log.events(Event::MergeReset), vec![40, 60, 80]);
    assert_eq!(out.log.events(Event::Prune), vec![40, 60, 80]);
    assert_eq!(out.log.losses().len(), 80);
    assert!(out.warm_start_eval.is_some());
    assert!(d.path().join(WARM_START_CHECKPOINT).exists());

    let csv = std::fs::read_to_string(d.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 80 + 1 + 6);
    for r in &rows {
        assert_eq!(r.len(), 6);
        if r[5].is_empty() {
            assert!(r[2].parse::<f64>().is_ok());
        } else {
            assert_eq!((r[2], r[3]), ("", ""), "event rows carry no loss");
        }
    }
}

#[test]
fn learning_rate_is_zero_at_each_reset() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let out = train_relora(&tiny_manifest(Mode::Relora, d.path()), &c).unwrap();
    for row in out.log.rows.iter().filter(|r| r.event == Event::None) {
        if [40, 60].contains(&row.step) {
            assert_eq!(row.lr, 0.0, "step {}", row.step);
        }
    }
}

#[test]
fn lora_mode_equals_relora_with_every_component_off() {
    let c = corpus();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let lora = train_relora(&tiny_manifest(Mode::Lora, d1.path()), &c).unwrap();
    let mut m = tiny_manifest(Mode::Relora, d2.path());
    m.relora = m.relora.clone().with_flags(false, false, false, false);
    let off = train_relora(&m, &c).unwrap();
    assert_eq!(lora.log.losses(), off.log.losses());
    assert_eq!(lora.final_eval, off.final_eval);
    assert!(lora.log.resets.is_empty());
}

#[test]
fn resuming_reproduces_the_uninterrupted_run() {
    let c = corpus();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut m = tiny_manifest(Mode::Relora, d1.path());
    m.checkpoint_every = 50;
    let full = train_relora(&m, &c).unwrap();
    let ckpt = d1.path().join(trainer::periodic_checkpoint_name(50));
    assert!(ckpt.exists());
    m.out_dir = Some(d2.path().to_path_buf());
    let resumed = trainer::resume(&m, &c, &ckpt).unwrap();
    let tail: Vec<f64> = full.log.rows.iter().filter(|r| r.step >= 50).filter_map(|r| r.loss).collect();
    assert_eq!(resumed.log.losses(), tail);
    assert_eq!(resumed.final_eval, full.final_eval);
    assert_eq!(weights(&d1.path().join(FINAL_CHECKPOINT)), weights(&d2.path().join(FINAL_CHECKPOINT)));
}

#[test]
fn resume_rejects_a_changed_architecture() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(Mode::Full, d.path());
    m.checkpoint_every = 10;
    m.total_steps = Some(10);
    train_full(&m, &c).unwrap();
    m.model = ModelConfig::new(64, 4, 2, 256, 32);
    let err = match Session::<f32>::resume(&m, &c, &d.path().join(trainer::periodic_checkpoint_name(10))) {
        Ok(_) => panic!("resume accepted a different width"),
        Err(e) => e,
    };
    assert!(matches!(err, relora::Error::TensorShape { .. }), "{err}");
}

#[test]
fn frozen_weights_only_change_by_merges() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let out = train_relora(&tiny_manifest(Mode::Relora, d.path()), &c).unwrap();
    let warm = Archive::load(&d.path().join(WARM_START_CHECKPOINT)).unwrap();
    let first = Archive::load(&d.path().join("reset_001.ckpt")).unwrap();
    // after a merge the frozen base equals the warm base plus the merged
    // update, whose norm the reset recorded
    let name = "layers.0.wv";
    let (_, w0) = relora::checkpoint::effective_weight(&warm, name).unwrap();
    let (_, w1) = relora::checkpoint::effective_weight(&first, name).unwrap();
    let moved: f64 = w0.iter().zip(&w1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let recorded = out.log.resets[0]
        .merges
        .iter()
        .find(|(id, _)| id.to_string() == name)
        .unwrap()
        .1
        .delta_norm;
    assert!((moved - recorded).abs() <= 1e-5 * recorded, "{moved} vs {recorded}");
}

#[test]
fn full_training_reduces_loss_substantially() {
    let c = synthetic_corpus(1 << 20, 2);
    let d = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(Mode::Full, d.path());
    m.model = ModelConfig::new(64, 4, 4, 256, 64);
    m.batch_size = 8;
    m.total_steps = Some(300);
    m.init_warmup_steps = 30;
    let out = train_full(&m, &c).unwrap();
    let losses = out.log.losses();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[losses.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail <= 0.7 * head, "loss {head} -> {tail}");
}

#[test]
fn untrained_model_is_near_uniform() {
    let c = Corpus::load(&common::shakespeare_path()).unwrap();
    let mut r = common::rng(3);
    let model = Transformer::<f32>::new(ModelConfig::new(64, 4, 2, 256, 64), &mut r).unwrap();
    let e = evaluate(&model, c.eval(), 32).unwrap();
    assert!((e.perplexity / 256.0 - 1.0).abs() <= 0.02, "ppl {}", e.perplexity);
    assert_eq!(e.tokens, 32 * 64);
}

#[test]
fn evaluation_matches_an_independent_log_softmax() {
    let c = corpus();
    let mut r = common::rng(4);
    let cfg = ModelConfig::new(32, 4, 2, 256, 16);
    let model = Transformer::<f64>::new(cfg, &mut r).unwrap();
    let e = evaluate(&model, c.eval(), 10).unwrap();
    let mut total = 0.0;
    let mut n = 0;
    for w in 0..10 {
        let window = &c.eval()[w * 16..w * 16 + 17];
        let inputs: Vec<usize> = window[..16].iter().map(|&b| b as usize).collect();
        let logits = model.logits(&inputs, 1, 16).unwrap();
        for t in 0..16 {
            let row = &logits.data()[t * 256..(t + 1) * 256];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[window[t + 1] as usize];
            n += 1;
        }
    }
    let nll = total / n as f64;
    assert!((e.mean_nll - nll).abs() < 1e-10);
    assert!((e.perplexity - nll.exp()).abs() < 1e-8);
}

#[test]
fn control_run_uses_a_matched_smaller_model() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(Mode::Control, d.path());
    m.model = ModelConfig::new(64, 4, 2, 256, 32);
    m.relora.rank = Some(8);
    m.total_steps = Some(10);
    let out = trainer::train_control(&m, &c).unwrap();
    let ctl = out.control.unwrap();
    assert!(ctl.within(0.05), "{ctl:?}");
    assert!(out.model_config.hidden < 64);
    let final_model: Transformer<f32> = load_model(&d.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(final_model.total_count(), ctl.achieved);
}

#[test]
fn exploding_learning_rate_is_reported_as_divergence() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(Mode::Full, d.path());
    m.peak_lr = 50.0;
    m.adam.max_grad_norm = 0.0;
    m.divergence_factor = 1.5;
    m.divergence_patience = 5;
    m.total_steps = Some(80);
    let err = train_full(&m, &c).unwrap_err();
    assert!(matches!(err, relora::Error::Diverged { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn ablation_rows_run_without_panicking() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let m = tiny_manifest(Mode::Relora, d.path());
    let results = trainer::ablate(&m, &c, &[3, 6]).unwrap();
    assert_eq!(results.len(), 2);
    assert_eq!(results[0].flags, (true, false, true, false));
    for r in &results {
        if let Ok(o) = &r.outcome {
            assert!(o.final_eval.perplexity.is_finite());
        }
        assert!(d.path().join(format!("row_{}", r.row)).exists());
    }
    // row 6 is warm start without restarts: no merges
    assert!(results[1].outcome.as_ref().unwrap().log.resets.is_empty());
}

#[test]
fn corpus_fingerprint_is_checked() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(Mode::Full, d.path());
    m.corpus_fingerprint = Some("00".repeat(32));
    let err = train_full(&m, &c).unwrap_err();
    assert!(matches!(err, relora::Error::Data(_)), "{err}");
    m.corpus_fingerprint = Some(c.fingerprint().to_string());
    m.total_steps = Some(2);
    assert!(train_full(&m, &c).is_ok());
}

#[test]
fn double_precision_runs_end_to_end() {
    let c = corpus();
    let d = tempfile::tempdir().unwrap();
    let mut m = tiny_manifest(Mode::Relora, d.path());
    m.dtype = DType::F64;
    let out = trainer::run(&m, &c).unwrap();
    assert_eq!(out.log.resets.len(), 3);
    let a = Archive::load(&d.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(a.get("dtype").unwrap(), "f64");
}

#[test]
fn command_line_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("corpus.txt");
    std::fs::write(&data, corpus().bytes()).unwrap();
    let conf = d.path().join("run.conf");
    let mut m = tiny_manifest(Mode::Relora, &d.path().join("run"));
    m.data = Some(data.clone());
    std::fs::write(&conf, m.to_text()).unwrap();
    let s = |p: &std::path::Path| p.to_str().unwrap().to_string();
    assert_eq!(relora::cli::run(["relora", "train", "--mode", "relora", "--config", &s(&conf)]), 0);
    let run = d.path().join("run");
    assert!(run.join("metrics.csv").exists() && run.join("summary.txt").exists());
    let ckpt = s(&run.join(FINAL_CHECKPOINT));
    assert_eq!(relora::cli::run(["relora", "eval", "--ckpt", &ckpt, "--data", &s(&data), "--windows", "8"]), 0);
    assert_eq!(relora::cli::run(["relora", "analyze", "ranks", "--run", &s(&run)]), 0);
    let spec = d.path().join("spec");
    let warm = s(&run.join(WARM_START_CHECKPOINT));
    assert_eq!(
        relora::cli::run(["relora", "analyze", "spectrum", "--ckpt-a", &warm, "--ckpt-b", &ckpt, "--out", &s(&spec)]),
        0
    );
    let summary = std::fs::read_to_string(spec.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 14);
    assert!(spec.join("spectra.csv").exists());
}
