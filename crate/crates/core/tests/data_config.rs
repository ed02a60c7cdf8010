mod common;

use std::collections::HashSet;

use common::rng;
use proptest::prelude::*;
use rand::RngCore;
use relora::checkpoint::{read_model_with_config, Archive, Buffer};
use relora::config::{Mode, RunManifest};
use relora::data::{detokenize, eval_windows, tokenize, BatchSpec, Batcher, Corpus};
use relora::model::{ModelConfig, Transformer};
use relora::tensor::DType;

#[test]
fn byte_tokenizer_round_trips_a_megabyte() {
    let mut bytes = vec![0u8; 1 << 20];
    rng(1).fill_bytes(&mut bytes);
    let ids = tokenize(&bytes);
    assert!(ids.iter().all(|&i| i < 256));
    assert_eq!(detokenize(&ids).unwrap(), bytes);
}

#[test]
fn eval_split_is_the_tail() {
    let c = Corpus::from_bytes((0..=255u8).cycle().take(1000).collect()).unwrap();
    assert_eq!(c.eval().len(), 50);
    assert_eq!(c.train(), &c.bytes()[..950]);
    assert_eq!(c.eval(), &c.bytes()[950..]);
    assert_eq!(c.split_offset(), 950);
}

#[test]
fn corpus_directory_is_read_in_name_order() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.txt"), b"second").unwrap();
    std::fs::write(dir.path().join("a.txt"), b"first-").unwrap();
    let c = Corpus::load(dir.path()).unwrap();
    assert_eq!(c.bytes(), b"first-second");
    let again = Corpus::from_bytes(b"first-second".to_vec()).unwrap();
    assert_eq!(c.fingerprint(), again.fingerprint());
}

#[test]
fn one_epoch_visits_every_window_once() {
    let mut tokens = vec![0u8; 8 * 100 + 1];
    rng(5).fill_bytes(&mut tokens);
    for shuffle in [false, true] {
        let spec = BatchSpec {
            batch_size: 4,
            seq_len: 8,
            shuffle,
            seed: 3,
        };
        let mut b = Batcher::new(&tokens, spec).unwrap();
        assert_eq!(b.windows_per_epoch(), 100);
        let mut starts = HashSet::new();
        for step in 0..25 {
            let batch = b.batch(step);
            assert_eq!(batch.epoch, 0);
            for j in 0..4 {
                let inp = &batch.inputs[j * 8..(j + 1) * 8];
                let tgt = &batch.targets[j * 8..(j + 1) * 8];
                assert_eq!(&inp[1..], &tgt[..7], "targets are inputs shifted by one");
                let start = (0..100)
                    .find(|w| tokenize(&tokens[w * 8..w * 8 + 9]) == [inp, &tgt[7..]].concat())
                    .expect("batch row is one of the windows");
                starts.insert(start);
            }
        }
        assert_eq!(starts.len(), 100);
        assert_eq!(b.batch(25).epoch, 1);
    }
}

#[test]
fn batches_are_a_pure_function_of_the_step() {
    let c = common::synthetic_corpus(50_000, 2);
    let spec = BatchSpec {
        batch_size: 8,
        seq_len: 32,
        shuffle: true,
        seed: 11,
    };
    let mut a = Batcher::new(c.train(), spec).unwrap();
    let mut b = Batcher::new(c.train(), spec).unwrap();
    let seq: Vec<_> = (0..400).map(|s| a.batch(s)).collect();
    for s in (0..400).rev() {
        assert_eq!(b.batch(s), seq[s]);
    }
    let other = BatchSpec { seed: 12, ..spec };
    let mut c2 = Batcher::new(c.train(), other).unwrap();
    assert_ne!(c2.batch(0), seq[0]);
    // a new epoch brings a new order
    let per_epoch = a.windows_per_epoch() / 8;
    assert_ne!(a.batch(per_epoch + 1).inputs, seq[1].inputs);
}

#[test]
fn eval_windows_are_in_corpus_order() {
    let tokens: Vec<u8> = (0..100u8).collect();
    let w = eval_windows(&tokens, 10, 0).unwrap();
    assert_eq!(w.len(), 9);
    assert_eq!(w[1].0, (10..20).collect::<Vec<_>>());
    assert_eq!(w[1].1, (11..21).collect::<Vec<_>>());
    assert_eq!(eval_windows(&tokens, 10, 3).unwrap().len(), 3);
    assert!(eval_windows(&tokens[..5], 10, 0).is_err());
}

const MINIMAL: &str = "# toy\nhidden = 32\nheads = 4\nlayers = 2\nseq_len = 16\nrank = 4\n";

#[test]
fn config_parses_with_defaults() {
    let m = RunManifest::parse(MINIMAL, Some(Mode::Relora)).unwrap();
    assert_eq!(m.model.vocab, 256);
    assert_eq!(m.relora.rank, Some(4));
    assert_eq!(m.relora.scale().unwrap(), 0.25);
    assert_eq!(m.relora.reset_steps(), vec![400, 600, 800]);
    assert_eq!(m.total_steps(), 800);
    assert_eq!(m.dtype, DType::F32);
}

#[test]
fn missing_rank_names_the_key() {
    let text = MINIMAL.replace("rank = 4\n", "");
    let err = RunManifest::parse(&text, Some(Mode::Relora)).unwrap_err();
    assert!(err.to_string().contains("rank"), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(RunManifest::parse(&text, Some(Mode::Full)).is_ok());
}

#[test]
fn malformed_configs_are_config_errors() {
    for text in [
        format!("{MINIMAL}bogus = 1\n"),
        format!("{MINIMAL}hidden = 32\n"),
        format!("{MINIMAL}peak_lr = fast\n"),
        MINIMAL.replace("heads = 4", "heads = 3"),
        format!("{MINIMAL}total_steps = 500\n"),
    ] {
        let err = RunManifest::parse(&text, Some(Mode::Relora)).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{text}: {err}");
    }
}

#[test]
fn oversized_rank_is_a_rank_error() {
    let text = MINIMAL.replace("rank = 4", "rank = 33");
    let err = RunManifest::parse(&text, Some(Mode::Relora)).unwrap_err();
    assert!(matches!(err, relora::Error::Rank(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_serialization_round_trips(
        seed in 0u64..1000,
        rank in 1usize..8,
        q in 1usize..500,
        n in 0usize..5,
        warm in 0usize..300,
        lr in 1e-5f64..1e-1,
        flags in prop::array::uniform4(any::<bool>()),
        mode in prop::sample::select(vec![Mode::Full, Mode::Control, Mode::Lora, Mode::Relora]),
    ) {
        let mut m = RunManifest::new(mode, ModelConfig::new(32, 4, 2, 256, 16));
        m.seed = seed;
        m.relora.rank = Some(rank);
        m.relora.reset_period = q;
        m.relora.num_resets = n;
        m.relora.warm_start_steps = warm;
        m.relora.restart_warmup_steps = q.min(50);
        m.relora = m.relora.clone().with_flags(flags[0], flags[1], flags[2], flags[3]);
        m.peak_lr = lr;
        m.init_warmup_steps = 0;
        m.dtype = DType::F64;
        let text = m.to_text();
        let back = RunManifest::parse(&text, None).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let mut r = rng(3);
    let model = Transformer::<f32>::new(ModelConfig::new(16, 2, 2, 64, 16), &mut r).unwrap();
    let mut archive = Archive::new();
    relora::checkpoint::write_model(&mut archive, &model);
    archive.set("note", "x = y");
    archive.put("extra", Buffer::from_slice(&[2, 2], &[1.0f64, -0.0, f64::MIN_POSITIVE, 1e300]));
    let bytes = archive.to_bytes();
    let back = Archive::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.get("note").unwrap(), "x = y");
    let restored = relora::checkpoint::read_model::<f32>(&back).unwrap();
    for ((ia, a), (ib, b)) in model.params().into_iter().zip(restored.params()) {
        assert_eq!(ia, ib);
        assert_eq!(a.data(), b.data());
        assert_eq!(a.requires_grad(), b.requires_grad());
    }
    assert!(Archive::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let mut r = rng(4);
    let model = Transformer::<f32>::new(ModelConfig::new(16, 2, 2, 64, 16), &mut r).unwrap();
    let mut archive = Archive::new();
    relora::checkpoint::write_model(&mut archive, &model);
    let err = read_model_with_config::<f32>(&archive, ModelConfig::new(32, 2, 2, 64, 16)).unwrap_err();
    match err {
        relora::Error::TensorShape { name, .. } => assert_eq!(name, "embed"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn cli_reports_config_errors_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("corpus.txt");
    std::fs::write(&data, common::synthetic_corpus(20_000, 1).bytes()).unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, MINIMAL.replace("rank = 4\n", "")).unwrap();
    let code = relora::cli::run([
        "relora",
        "train",
        "--mode",
        "relora",
        "--config",
        conf.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 3);
    let code = relora::cli::run(["relora", "eval", "--ckpt", "/nonexistent.ckpt", "--data", data.to_str().unwrap()]);
    assert_eq!(code, 1);
}
