//! Pretraining behaviour and checkpoint persistence on the committed fixtures.

use std::fs;
use std::path::PathBuf;

use lrlm_core::corpus::{normalize_text, NormConfig};
use lrlm_core::mlm::{build_sequences, InputSequence, MaskedBatch, MaskingPolicy};
use lrlm_core::model::{
    forward_mlm, init_model, pretrain, EncoderCheckpoint, Mode, ModelConfig, PretrainSchedule,
    TrainingMeta,
};
use lrlm_core::tokenizer::{count_words, train_wordpiece, SubwordVocabulary, TrainerConfig};
use lrlm_core::Error;

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

fn pretrain_corpus() -> (SubwordVocabulary, Vec<InputSequence>) {
    let cfg = NormConfig::default();
    let lines: Vec<String> = fs::read_to_string(fixture("pretrain.txt"))
        .unwrap()
        .lines()
        .map(|l| normalize_text(l, &cfg))
        .collect();
    let vocab = train_wordpiece(
        &count_words(&lines),
        &TrainerConfig {
            vocab_size: 200,
            ..TrainerConfig::default()
        },
    )
    .unwrap();
    let ids: Vec<Vec<u32>> = lines.iter().map(|l| vocab.encode(l)).collect();
    (vocab, build_sequences(&ids, 32).unwrap())
}

fn schedule(steps: usize) -> PretrainSchedule {
    PretrainSchedule {
        steps,
        batch_size: 16,
        lr: 1e-3,
        warmup_frac: 0.1,
        ..PretrainSchedule::default()
    }
}

#[test]
fn desk_pretraining_reduces_smoothed_loss() {
    let (vocab, seqs) = pretrain_corpus();
    let cfg = ModelConfig::desk(vocab.len());
    let policy = MaskingPolicy::default();
    let a = pretrain(
        &seqs,
        &cfg,
        &policy,
        &schedule(200),
        7,
        &vocab.fingerprint(),
    )
    .unwrap();
    let first = a.initial_smoothed_loss().unwrap();
    let last = a.final_smoothed_loss().unwrap();
    let reduction = 1.0 - last / first;
    println!(
        "smoothed MLM loss {first:.4} -> {last:.4} ({:.1}% reduction)",
        100.0 * reduction
    );
    assert!(reduction >= 0.20, "reduction {reduction}");
    assert_eq!(a.log.len(), 20);
    assert_eq!(a.checkpoint.meta.steps, 200);
}

#[test]
fn rerun_with_the_same_seed_is_byte_identical() {
    let (vocab, seqs) = pretrain_corpus();
    let cfg = ModelConfig::desk(vocab.len());
    let run = |seed| {
        pretrain(
            &seqs,
            &cfg,
            &MaskingPolicy::default(),
            &schedule(12),
            seed,
            &vocab.fingerprint(),
        )
        .unwrap()
    };
    let (a, b, c) = (run(7), run(7), run(8));
    assert_eq!(
        a.checkpoint.to_bytes().unwrap(),
        b.checkpoint.to_bytes().unwrap()
    );
    assert_eq!(a.losses, b.losses);
    assert_ne!(a.losses, c.losses);
}

#[test]
fn zero_steps_returns_the_initialization() {
    let (vocab, seqs) = pretrain_corpus();
    let cfg = ModelConfig::desk(vocab.len());
    let out = pretrain(
        &seqs,
        &cfg,
        &MaskingPolicy::default(),
        &schedule(0),
        3,
        &vocab.fingerprint(),
    )
    .unwrap();
    assert_eq!(out.checkpoint.params, init_model(&cfg, 3).unwrap());
    assert!(out.losses.is_empty() && out.log.is_empty());
}

#[test]
fn divergence_aborts_with_the_last_finite_checkpoint() {
    let (vocab, seqs) = pretrain_corpus();
    let cfg = ModelConfig {
        max_positions: 32,
        ..ModelConfig::tiny(vocab.len())
    };
    let mut sched = schedule(20);
    sched.lr = 1e38;
    sched.warmup_frac = 0.0;
    sched.weight_decay = 0.0;
    let err = pretrain(
        &seqs,
        &cfg,
        &MaskingPolicy::default(),
        &sched,
        1,
        &vocab.fingerprint(),
    )
    .unwrap_err();
    match err {
        Error::Diverged { step, last_good } => {
            assert!(step >= 1);
            assert_eq!(last_good.meta.steps, step - 1);
            last_good.params.check_finite().unwrap();
        }
        other => panic!("expected divergence, got {other}"),
    }
}

fn fixed_batch(seqs: &[InputSequence]) -> MaskedBatch {
    lrlm_core::mlm::apply_masking(&seqs[..6], &MaskingPolicy::default(), 200).unwrap()
}

#[test]
fn checkpoint_round_trip_preserves_logits_bit_for_bit() {
    let (vocab, seqs) = pretrain_corpus();
    let cfg = ModelConfig::desk(vocab.len());
    let out = pretrain(
        &seqs,
        &cfg,
        &MaskingPolicy::default(),
        &schedule(5),
        11,
        &vocab.fingerprint(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = EncoderCheckpoint::load_with_vocab(&path, &vocab).unwrap();
    assert_eq!(loaded, out.checkpoint);
    let batch = fixed_batch(&seqs);
    let a = forward_mlm(&cfg, &out.checkpoint.params, &batch, Mode::Eval).unwrap();
    let b = forward_mlm(&loaded.config, &loaded.params, &batch, Mode::Eval).unwrap();
    assert!(a
        .logits
        .iter()
        .zip(b.logits.iter())
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn truncated_blob_is_a_format_error() {
    let cfg = ModelConfig::tiny(40);
    let ckpt = EncoderCheckpoint::new(
        cfg.clone(),
        init_model(&cfg, 0).unwrap(),
        "abc".into(),
        TrainingMeta::default(),
    )
    .unwrap();
    let bytes = ckpt.to_bytes().unwrap();
    assert_eq!(EncoderCheckpoint::from_bytes(&bytes).unwrap(), ckpt);
    for cut in [1, 4, bytes.len() / 2, bytes.len() - 9] {
        let err = EncoderCheckpoint::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
        assert!(matches!(err, Error::CheckpointFormat(_)), "{err}");
    }
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0, 0, 0, 0]);
    assert!(matches!(
        EncoderCheckpoint::from_bytes(&extra),
        Err(Error::CheckpointFormat(_))
    ));
}

#[test]
fn checkpoint_refuses_a_different_vocabulary() {
    let (vocab_a, _) = pretrain_corpus();
    let mut pieces = vocab_a.pieces().to_vec();
    pieces.pop();
    pieces.push("zzzz".into());
    let vocab_b = SubwordVocabulary::from_pieces(pieces).unwrap();
    let cfg = ModelConfig::tiny(vocab_a.len());
    let ckpt = EncoderCheckpoint::new(
        cfg.clone(),
        init_model(&cfg, 0).unwrap(),
        vocab_a.fingerprint(),
        TrainingMeta::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    ckpt.save(&path).unwrap();
    assert!(EncoderCheckpoint::load_with_vocab(&path, &vocab_a).is_ok());
    let err = EncoderCheckpoint::load_with_vocab(&path, &vocab_b).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch { .. }), "{err}");
}
