use claimcheck_core::corpus::{posts_checksum, split_corpus, synthetic_corpus, SplitFractions};
use claimcheck_core::encoding::EncoderRegistry;
use claimcheck_core::models::{
    build_model, Architecture, Classifier, Mode, ModelSpec, PARAMS_FILE,
};
use claimcheck_core::training::{
    batch_gradients, bce_loss, evaluate, train, Optimizer, PreparedSet, TrainConfig,
};
use claimcheck_core::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn test_model(variant: Architecture, d: usize, max_len: usize, seed: u64) -> Classifier {
    let spec = ModelSpec::architecture(variant, variant.test_encoders(d, seed), max_len);
    build_model(spec, seed, &EncoderRegistry::default()).unwrap()
}

fn eval_loss(model: &Classifier, set: &PreparedSet) -> f64 {
    bce_loss(&model.forward(&set.batches).unwrap(), &set.labels).unwrap()
}

#[test]
fn one_adam_step_lowers_batch_loss_for_every_variant() {
    let posts = synthetic_corpus(8, 17);
    let config = TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    for variant in Architecture::ALL {
        let mut outcomes = Vec::new();
        for seed in 0..3 {
            let mut model = test_model(variant, 16, 8, 100 + seed);
            model.set_mode(Mode::Eval);
            let set = PreparedSet::new(&model, &posts).unwrap();
            let before = eval_loss(&model, &set);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grads = batch_gradients(&model, &set.batches, &set.labels, &mut rng).unwrap();
            assert!((grads.loss - before).abs() < 1e-12);
            let mut optimizer = Optimizer::new(&model, &config);
            optimizer.apply(&mut model, &grads);
            let after = eval_loss(&model, &set);
            outcomes.push((before, after));
            if after < before {
                break;
            }
        }
        let (before, after) = *outcomes.last().unwrap();
        assert!(
            after < before,
            "{}: loss did not decrease in 3 seeds: {outcomes:?}",
            variant.key()
        );
    }
}

#[test]
fn dense_head_overfits_separable_corpus() {
    let posts = synthetic_corpus(64, 4);
    let mut model = test_model(Architecture::BertDense, 16, 12, 9);
    let set = PreparedSet::new(&model, &posts).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut optimizer = Optimizer::new(&model, &config);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut steps = 0;
    model.set_mode(Mode::Train);
    while steps < 200 {
        order.shuffle(&mut rng);
        for rows in order.chunks(config.batch_size) {
            let (batches, labels) = set.select(rows);
            let grads = batch_gradients(&model, &batches, &labels, &mut rng).unwrap();
            optimizer.apply(&mut model, &grads);
            steps += 1;
        }
    }
    let (_, accuracy) = evaluate(&mut model, &set, 32).unwrap();
    assert!(
        accuracy >= 0.95,
        "train accuracy {accuracy} after {steps} steps"
    );
}

fn small_split() -> claimcheck_core::corpus::CorpusSplit {
    split_corpus(&synthetic_corpus(40, 8), SplitFractions::default(), 2).unwrap()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        epochs: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_match() {
    let split = small_split();
    let run = || {
        train(
            test_model(Architecture::Hybrid, 8, 10, 3),
            &split,
            &quick_config(),
        )
        .unwrap()
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(h1.to_jsonl(), h2.to_jsonl());
    assert_eq!(h1.epochs.len(), 2);
    assert!(h1
        .epochs
        .iter()
        .all(|e| e.train_loss.is_finite() && e.train_loss >= 0.0));
    assert_eq!(m1.params().values(), m2.params().values());

    let dir = tempfile::tempdir().unwrap();
    m1.save_checkpoint(dir.path().join("a")).unwrap();
    m2.save_checkpoint(dir.path().join("b")).unwrap();
    for file in std::fs::read_dir(dir.path().join("a")).unwrap() {
        let name = file.unwrap().file_name();
        let a = std::fs::read(dir.path().join("a").join(&name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
    assert!(dir.path().join("a").join(PARAMS_FILE).exists());
}

#[test]
fn returned_model_scores_best_epoch_validation_loss() {
    let split = small_split();
    let config = TrainConfig {
        epochs: 3,
        ..quick_config()
    };
    let (mut model, history) = train(
        test_model(Architecture::BertLstm, 8, 10, 6),
        &split,
        &config,
    )
    .unwrap();
    let best = &history.epochs[history.best_epoch];
    assert!(history.epochs.iter().all(|e| e.val_loss >= best.val_loss));
    let val = PreparedSet::new(&model, &split.validation).unwrap();
    let (loss, _) = evaluate(&mut model, &val, 8).unwrap();
    assert!((loss - best.val_loss).abs() < 1e-12);
    assert_eq!(model.mode(), Mode::Eval);
}

#[test]
fn training_leaves_test_split_untouched() {
    let split = small_split();
    let before = posts_checksum(&split.test);
    let _ = train(
        test_model(Architecture::Roberta, 8, 10, 1),
        &split,
        &quick_config(),
    )
    .unwrap();
    assert_eq!(posts_checksum(&split.test), before);
}

#[test]
fn invalid_configs_are_rejected() {
    let split = small_split();
    let zero_epochs = TrainConfig {
        epochs: 0,
        ..quick_config()
    };
    let err = train(
        test_model(Architecture::BertDense, 8, 10, 1),
        &split,
        &zero_epochs,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.is_usage());
}

#[test]
fn frozen_encoders_keep_their_parameters() {
    let split = small_split();
    let variant = Architecture::BertDense;
    let mut spec = ModelSpec::architecture(variant, variant.test_encoders(8, 2), 10);
    spec.fine_tune_encoders = false;
    let model = build_model(spec, 2, &EncoderRegistry::default()).unwrap();
    let encoder_before = model.encoders()[0].params().unwrap().values().to_vec();
    let head_before = model.params().values().to_vec();
    let (trained, _) = train(model, &split, &quick_config()).unwrap();
    assert_eq!(
        trained.encoders()[0].params().unwrap().values(),
        encoder_before.as_slice()
    );
    assert_ne!(trained.params().values(), head_before.as_slice());
}
