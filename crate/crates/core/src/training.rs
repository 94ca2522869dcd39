//! Binary cross-entropy, Adam, and the fine-tuning loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{floor_share, CorpusSplit, Label, LabeledPost};
use crate::encoding::EncodedBatch;
use crate::error::{Error, Result};
use crate::models::{Classifier, Mode};

/// Probabilities are clamped into `[BCE_EPS, 1 - BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub seed: u64,
    pub shuffle: bool,
    /// Fractions of train and validation kept by [`hparam_subset`].
    pub hparam_train_fraction: f64,
    pub hparam_validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 3,
            seed: 0,
            shuffle: true,
            hparam_train_fraction: 0.4,
            hparam_validation_fraction: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        for f in [self.hparam_train_fraction, self.hparam_validation_fraction] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "subset fraction must be in (0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

fn check_lengths(probs: &[f64], labels: &[Label]) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Mean of `-[y ln p + (1 - y) ln(1 - p)]` with `p` clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[Label]) -> Result<f64> {
    check_lengths(probs, labels)?;
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            match y {
                Label::Fake => -p.ln(),
                Label::Real => -(1.0 - p).ln(),
            }
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Gradient of [`bce_loss`] with respect to the logits behind `probs`.
/// Rows where the clamp is active contribute nothing.
pub fn bce_logit_grad(probs: &[f64], labels: &[Label]) -> Result<Vec<f64>> {
    check_lengths(probs, labels)?;
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            if *p < BCE_EPS || *p > 1.0 - BCE_EPS {
                0.0
            } else {
                (p - y.index() as f64) / n
            }
        })
        .collect())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn from_config(len: usize, config: &TrainConfig) -> Self {
        Adam::new(
            len,
            config.learning_rate,
            config.beta1,
            config.beta2,
            config.epsilon,
        )
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Loss, probabilities and gradients of one batch.
pub struct BatchGradients {
    pub loss: f64,
    pub probs: Vec<f64>,
    pub head: Vec<f64>,
    /// One entry per encoder; `None` for frozen encoders.
    pub encoders: Vec<Option<Vec<f64>>>,
}

/// Forward and backward pass of BCE on one batch in the model's current
/// mode; dropout masks come from `rng`.
pub fn batch_gradients(
    model: &Classifier,
    batches: &[EncodedBatch],
    labels: &[Label],
    rng: &mut ChaCha8Rng,
) -> Result<BatchGradients> {
    let (input, _) = model.head_input(batches)?;
    let trace = model.head_forward(&input, rng)?;
    let loss = bce_loss(&trace.probs, labels)?;
    let dlogits = bce_logit_grad(&trace.probs, labels)?;
    let (head, dinput) = model.head_backward(&input, &trace, &dlogits);
    let encoders = model.encoder_backward(batches, &dinput)?;
    Ok(BatchGradients {
        loss,
        probs: trace.probs,
        head,
        encoders,
    })
}

/// Optimizer state for a classifier: one Adam for the head and one per
/// trainable encoder.
pub struct Optimizer {
    head: Adam,
    encoders: Vec<Option<Adam>>,
}

impl Optimizer {
    pub fn new(model: &Classifier, config: &TrainConfig) -> Self {
        let encoders = (0..model.encoders().len())
            .map(|i| {
                model
                    .encoder_trainable(i)
                    .then(|| Adam::from_config(model.encoders()[i].params().unwrap().len(), config))
            })
            .collect();
        Optimizer {
            head: Adam::from_config(model.params().len(), config),
            encoders,
        }
    }

    pub fn apply(&mut self, model: &mut Classifier, grads: &BatchGradients) {
        self.head.step(model.params_mut().values_mut(), &grads.head);
        for (i, (adam, grad)) in self.encoders.iter_mut().zip(&grads.encoders).enumerate() {
            if let (Some(adam), Some(grad)) = (adam, grad) {
                let params = model.encoders_mut()[i]
                    .params_mut()
                    .expect("trainable encoder has parameters");
                adam.step(params.values_mut(), grad);
            }
        }
    }
}

/// Metrics of one completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Excluded from serialized history so that reruns are byte-identical.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// One JSON object per line, each carrying the schema version.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            let line = serde_json::json!({
                "schema_version": crate::SCHEMA_VERSION,
                "epoch": rec.epoch,
                "train_loss": rec.train_loss,
                "train_accuracy": rec.train_accuracy,
                "val_loss": rec.val_loss,
                "val_accuracy": rec.val_accuracy,
                "best": rec.epoch == self.best_epoch,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Texts and labels tokenized once for the model.
pub struct PreparedSet {
    pub batches: Vec<EncodedBatch>,
    pub labels: Vec<Label>,
}

impl PreparedSet {
    pub fn new(model: &Classifier, posts: &[LabeledPost]) -> Result<Self> {
        let texts: Vec<&str> = posts.iter().map(|p| p.text.as_str()).collect();
        Ok(PreparedSet {
            batches: model.tokenize(&texts)?,
            labels: posts.iter().map(|p| p.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> (Vec<EncodedBatch>, Vec<Label>) {
        (
            self.batches.iter().map(|b| b.select_rows(rows)).collect(),
            rows.iter().map(|r| self.labels[*r]).collect(),
        )
    }
}

fn accuracy(probs: &[f64], labels: &[Label]) -> usize {
    probs
        .iter()
        .zip(labels)
        .filter(|(p, y)| (**p >= 0.5) == (**y == Label::Fake))
        .count()
}

/// Eval-mode probabilities over a prepared set, in batches.
pub fn predict_probs(model: &Classifier, set: &PreparedSet, batch_size: usize) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (batches, _) = set.select(chunk);
        probs.extend(model.forward(&batches)?);
    }
    Ok(probs)
}

/// Mean BCE loss and accuracy (threshold 0.5) in eval mode.
pub fn evaluate(
    model: &mut Classifier,
    set: &PreparedSet,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let probs = predict_probs(model, set, batch_size);
    model.set_mode(previous);
    let probs = probs?;
    Ok((
        bce_loss(&probs, &set.labels)?,
        accuracy(&probs, &set.labels) as f64 / set.len() as f64,
    ))
}

struct Snapshot {
    head: Vec<f64>,
    encoders: Vec<Option<Vec<f64>>>,
}

impl Snapshot {
    fn take(model: &Classifier) -> Self {
        Snapshot {
            head: model.params().values().to_vec(),
            encoders: model
                .encoders()
                .iter()
                .map(|e| e.params().map(|p| p.values().to_vec()))
                .collect(),
        }
    }

    fn restore(self, model: &mut Classifier) -> Result<()> {
        model.params_mut().assign(&self.head)?;
        for (enc, values) in model.encoders_mut().iter_mut().zip(self.encoders) {
            if let (Some(p), Some(v)) = (enc.params_mut(), values) {
                p.assign(&v)?;
            }
        }
        Ok(())
    }
}

/// Fine-tunes `model` on `split.train`, scoring `split.validation` after
/// every epoch, and returns the model with the parameters of the epoch with
/// the lowest validation loss. The test split is not read.
///
/// Each epoch shuffles the training set with the seeded generator and takes
/// one Adam step per batch; the final partial batch is kept.
pub fn train(
    mut model: Classifier,
    split: &CorpusSplit,
    config: &TrainConfig,
) -> Result<(Classifier, TrainHistory)> {
    config.validate()?;
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(Error::Precondition(
            "train and validation splits must be non-empty".into(),
        ));
    }
    let train_set = PreparedSet::new(&model, &split.train)?;
    let val_set = PreparedSet::new(&model, &split.validation)?;
    let mut optimizer = Optimizer::new(&model, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Snapshot)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        model.set_mode(Mode::Train);
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (batch_index, rows) in order.chunks(config.batch_size).enumerate() {
            let (batches, labels) = train_set.select(rows);
            let grads = batch_gradients(&model, &batches, &labels, &mut rng)?;
            if !grads.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                    loss: grads.loss,
                });
            }
            loss_sum += grads.loss * rows.len() as f64;
            correct += accuracy(&grads.probs, &labels);
            optimizer.apply(&mut model, &grads);
        }
        let (val_loss, val_accuracy) = evaluate(&mut model, &val_set, config.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
            wall_time_secs: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            history.best_epoch = epoch;
            best = Some((val_loss, Snapshot::take(&model)));
        }
    }
    if let Some((_, snapshot)) = best {
        snapshot.restore(&mut model)?;
    }
    model.set_mode(Mode::Eval);
    Ok((model, history))
}

/// Seeded subsample of train and validation for hyperparameter search,
/// keeping `floor(fraction * n)` items (at least one) of each. The test
/// split is returned unchanged.
pub fn hparam_subset(
    split: &CorpusSplit,
    train_fraction: f64,
    validation_fraction: f64,
    seed: u64,
) -> Result<CorpusSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sample = |posts: &[LabeledPost], fraction: f64| -> Result<Vec<LabeledPost>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!(
                "subset fraction must be in (0, 1], got {fraction}"
            )));
        }
        let k = floor_share(fraction, posts.len()).max(1).min(posts.len());
        let mut idx = rand::seq::index::sample(&mut rng, posts.len(), k).into_vec();
        idx.sort_unstable();
        Ok(idx.into_iter().map(|i| posts[i].clone()).collect())
    };
    let train = sample(&split.train, train_fraction)?;
    let validation = sample(&split.validation, validation_fraction)?;
    CorpusSplit::from_parts(train, validation, split.test.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label::{Fake, Real};

    #[test]
    fn bce_examples() {
        assert!(
            (bce_loss(&[0.5, 0.5], &[Real, Fake]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12
        );
        let expected = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((bce_loss(&[0.9, 0.1], &[Fake, Real]).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.10536).abs() < 1e-5);
        let near_one = bce_loss(&[1.0 - 1e-7], &[Fake]).unwrap();
        assert!((near_one - 1e-7).abs() < 1e-9);
        assert!(bce_loss(&[1.0], &[Real]).unwrap().is_finite());
        assert!(matches!(
            bce_loss(&[0.5], &[Real, Fake]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn bce_grad_matches_finite_difference_in_logit_space() {
        let logits = [0.3, -1.2, 2.0];
        let labels = [Fake, Real, Real];
        let probs: Vec<f64> = logits.iter().map(|z| crate::models::sigmoid(*z)).collect();
        let g = bce_logit_grad(&probs, &labels).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = logits;
            up[i] += h;
            let mut down = logits;
            down[i] -= h;
            let f = |z: &[f64; 3]| bce_loss(&z.map(crate::models::sigmoid), &labels).unwrap();
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2, 0.01, 0.9, 0.999, 1e-8);
        let mut p = [1.0, -1.0];
        adam.step(&mut p, &[0.5, -3.0]);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(zero_epochs.validate(), Err(Error::Config(_))));
        let zero_batch = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(zero_batch.validate().is_err());
    }

    fn posts(prefix: &str, n: usize) -> Vec<LabeledPost> {
        (0..n)
            .map(|i| {
                LabeledPost::new(
                    format!("{prefix}{i}"),
                    "x",
                    if i % 2 == 0 { Real } else { Fake },
                )
            })
            .collect()
    }

    #[test]
    fn hparam_subset_sizes() {
        let split =
            CorpusSplit::from_parts(posts("a", 6420), posts("b", 2140), posts("c", 2140)).unwrap();
        let sub = hparam_subset(&split, 0.4, 0.3, 9).unwrap();
        assert_eq!(sub.sizes(), (2568, 642, 2140));
        assert_eq!(sub.test, split.test);

        let small = CorpusSplit::from_parts(posts("a", 10), posts("b", 5), posts("c", 5)).unwrap();
        let a = hparam_subset(&small, 0.4, 1.0, 3).unwrap();
        let b = hparam_subset(&small, 0.4, 1.0, 3).unwrap();
        assert_eq!(a.train.len(), 4);
        assert_eq!(a, b);
        assert_eq!(a.validation, small.validation);
        let full = hparam_subset(&small, 1.0, 1.0, 3).unwrap();
        assert_eq!(full, small);
    }
}
