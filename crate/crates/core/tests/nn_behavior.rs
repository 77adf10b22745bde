//! Behavioral tests for the neural parser: capacity, decoding
//! equivalences, freezing, and checkpointing.

use std::collections::BTreeSet;

use semparse::bpe::{learn_bpe, word_frequencies};
use semparse::dataset::{Corpus, Split};
use semparse::nn::{
    build_vocab, load_checkpoint, mlm_pretrain, save_checkpoint, train_parser, DecodeOptions,
    ParamGroup, ParserConfig, ParserModel, UnfreezeSchedule,
};
use semparse::synth::{generate_corpus, SlotFillers};

fn small_config() -> ParserConfig {
    ParserConfig {
        enc_layers: 1,
        dec_layers: 1,
        model_dim: 32,
        heads: 2,
        ffn_dim: 64,
        dropout: 0.0,
        max_decode_len: 48,
        beam_size: 4,
        learning_rate: 3e-3,
        batch_size: 8,
        patience: 1000,
        max_epochs: 1,
        use_copy: true,
        seed: 42,
    }
}

fn corpus_bpe(corpora: &[&Corpus], merges: usize) -> semparse::bpe::BpeModel {
    let mut freqs = word_frequencies(
        corpora
            .iter()
            .flat_map(|c| c.examples.iter().map(|e| &e.question_tokens)),
    );
    for corpus in corpora {
        for e in &corpus.examples {
            for tok in e.mrl_string().split_whitespace() {
                *freqs.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
    }
    learn_bpe(&freqs, merges).unwrap()
}

fn model_over(corpora: &[&Corpus], config: ParserConfig) -> ParserModel {
    let bpe = corpus_bpe(corpora, 120);
    let vocab = build_vocab(corpora, &bpe);
    ParserModel::new(config, vocab, bpe).unwrap()
}

#[test]
fn single_batch_overfit() {
    let train = generate_corpus(Split::Train, "aa", 8, 5, &SlotFillers::Closed);
    let mut config = small_config();
    config.max_epochs = 300; // batch_size 8 over 8 examples = 1 step/epoch
    let mut model = model_over(&[&train], config);
    let history = train_parser(&mut model, &train, &train, &UnfreezeSchedule::default()).unwrap();
    let last = history.epochs.last().unwrap();
    assert!(
        last.train_loss < 0.05,
        "train loss after {} steps: {}",
        history.epochs.len(),
        last.train_loss
    );
}

#[test]
fn greedy_equals_beam_one_on_untrained_model() {
    let corpus = generate_corpus(Split::Train, "aa", 16, 9, &SlotFillers::Closed);
    let model = model_over(&[&corpus], small_config());
    for e in corpus.examples.iter().take(6) {
        let greedy = model.decode_greedy(&e.question_tokens);
        let beam1 = model.decode_beam(
            &e.question_tokens,
            &DecodeOptions { beam_size: 1, max_len: None },
        );
        assert_eq!(greedy.actions, beam1.actions, "question {:?}", e.question());
        assert_eq!(greedy.mrl, beam1.mrl);
    }
}

#[test]
fn action_distribution_is_normalized() {
    let corpus = generate_corpus(Split::Train, "aa", 4, 2, &SlotFillers::Closed);
    let model = model_over(&[&corpus], small_config());
    let e = &corpus.examples[0];
    let src = model.encode_source(&e.question_tokens);
    let dist = model.action_distribution(&src, &[]);
    assert_eq!(dist.len(), model.vocab.len() + src.len());
    let sum: f64 = dist.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(dist.iter().all(|&p| p >= 0.0));
}

#[test]
fn frozen_encoder_is_bit_identical_after_training() {
    let train = generate_corpus(Split::Train, "aa", 24, 5, &SlotFillers::Closed);
    let dev = generate_corpus(Split::Dev, "aa", 8, 6, &SlotFillers::Closed);
    let mut config = small_config();
    config.max_epochs = 4;
    config.dropout = 0.1;
    let mut model = model_over(&[&train, &dev], config);
    let before: Vec<_> = model
        .params()
        .iter()
        .filter(|p| !matches!(p.group, ParamGroup::Decoder))
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    train_parser(
        &mut model,
        &train,
        &dev,
        &UnfreezeSchedule { rate: 0.0, gradual: false },
    )
    .unwrap();
    let after: Vec<_> = model
        .params()
        .iter()
        .filter(|p| !matches!(p.group, ParamGroup::Decoder))
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    assert_eq!(before.len(), after.len());
    for ((name_b, b), (name_a, a)) in before.iter().zip(&after) {
        assert_eq!(name_b, name_a);
        assert!(
            b.iter().zip(a.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "encoder param {name_b} changed while frozen"
        );
    }
}

#[test]
fn checkpoint_roundtrip_preserves_decoding() {
    let train = generate_corpus(Split::Train, "aa", 24, 5, &SlotFillers::Closed);
    let dev = generate_corpus(Split::Dev, "aa", 8, 6, &SlotFillers::Closed);
    let mut config = small_config();
    config.max_epochs = 3;
    let mut model = model_over(&[&train, &dev], config);
    train_parser(&mut model, &train, &dev, &UnfreezeSchedule::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored.train_langs, BTreeSet::from(["aa".to_string()]));
    assert_eq!(restored.vocab.symbols(), model.vocab.symbols());
    for e in dev.examples.iter().take(5) {
        let a = model.decode_beam(&e.question_tokens, &DecodeOptions::default());
        let b = restored.decode_beam(&e.question_tokens, &DecodeOptions::default());
        assert_eq!(a.mrl, b.mrl);
        assert!((a.score - b.score).abs() < 1e-12);
    }

    // Saving the restored model again is byte-identical.
    let path2 = dir.path().join("model2.ckpt");
    save_checkpoint(&restored, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn mlm_loss_decreases() {
    let corpus = generate_corpus(Split::Train, "aa", 300, 7, &SlotFillers::Closed);
    let sentences: Vec<Vec<String>> =
        corpus.examples.iter().map(|e| e.question_tokens.clone()).collect();
    let mut config = small_config();
    config.dropout = 0.0;
    let mut model = model_over(&[&corpus], config);
    let history = mlm_pretrain(&mut model, &sentences, 4).unwrap();
    let first = history.epochs.first().unwrap().loss;
    let last = history.epochs.last().unwrap().loss;
    assert!(
        last < first,
        "MLM loss did not decrease: {first} -> {last}"
    );
    // The temporary head is gone and the decoder never moved.
    assert!(model.params().iter().all(|p| !p.name.starts_with("mlm.")));
}

#[test]
fn training_history_is_seed_deterministic() {
    let train = generate_corpus(Split::Train, "aa", 32, 5, &SlotFillers::Closed);
    let dev = generate_corpus(Split::Dev, "aa", 8, 6, &SlotFillers::Closed);
    let mut config = small_config();
    config.max_epochs = 3;
    config.dropout = 0.1;

    let mut run = || {
        let mut model = model_over(&[&train, &dev], config.clone());
        train_parser(&mut model, &train, &dev, &UnfreezeSchedule::default()).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}
