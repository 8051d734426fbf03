//! Classifier training for both estimator kinds.
//!
//! Real sentences carry label 0 and model samples label 1, so the classifier
//! output approximates `P_model / (P_true + P_model)` and its logit is
//! `ln γ`. Training is minibatch gradient descent on binary cross-entropy
//! with equal real/negative counts per batch and early stopping on a held-out
//! slice.

use rand::seq::SliceRandom;
use rand::Rng;

use super::cnn::{bce, sigmoid, Arch, ConvSpec, Network};
use super::{PrefixRatioEstimator, RatioEstimator, DEFAULT_GAMMA_MAX};
use crate::corpus::{Sentence, TokenId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub embed_dim: usize,
    pub convs: Vec<ConvSpec>,
    pub learning_rate: f64,
    /// Total batch size; half real, half negative.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub holdout_fraction: f64,
    pub gamma_max: f64,
    pub init_scale: f64,
    pub min_real: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = Arch::standard(2);
        TrainConfig {
            embed_dim: arch.embed_dim,
            convs: arch.convs,
            learning_rate: 0.05,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            holdout_fraction: 0.1,
            gamma_max: DEFAULT_GAMMA_MAX,
            init_scale: 1.0,
            min_real: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self, vocab_size: usize) -> Arch {
        Arch {
            vocab_size,
            embed_dim: self.embed_dim,
            convs: self.convs.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return bad("batch size must be even and at least 2");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 0.5) {
            return bad("holdout fraction must lie in (0, 0.5)");
        }
        if !(self.gamma_max.is_finite() && self.gamma_max > 1.0) {
            return bad("gamma_max must exceed 1");
        }
        if self.embed_dim == 0 || self.convs.iter().any(|c| c.filters == 0 || c.kernel == 0) {
            return bad("network dimensions must be positive");
        }
        Ok(())
    }
}

/// Which logit the loss is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// The whole-sentence logit.
    Full,
    /// The largest prefix logit over prefixes `1..=N` (dual form); the
    /// gradient flows to the arg-max prefix, ties going to the earliest.
    Dual,
}

impl Objective {
    fn select(self, logits: &[f64]) -> usize {
        match self {
            Objective::Full => logits.len() - 1,
            Objective::Dual => {
                let mut best = 1;
                for i in 2..logits.len() {
                    if logits[i] > logits[best] {
                        best = i;
                    }
                }
                best
            }
        }
    }
}

/// Loss of one labelled example.
pub fn example_loss(net: &Network, ids: &[TokenId], label: f64, obj: Objective) -> f64 {
    let logits = net.prefix_logits(ids);
    bce(logits[obj.select(&logits)], label)
}

/// Loss and its gradient for one labelled example.
pub fn example_loss_and_grad(
    net: &Network,
    ids: &[TokenId],
    label: f64,
    obj: Objective,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; net.params().len()];
    let loss = accumulate_grad(net, ids, label, obj, 1.0, &mut grad);
    (loss, grad)
}

fn accumulate_grad(
    net: &Network,
    ids: &[TokenId],
    label: f64,
    obj: Objective,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    let fwd = net.forward(ids);
    let i = obj.select(&fwd.logits);
    let logit = fwd.logits[i];
    net.backward(ids, &fwd, i, scale * (sigmoid(logit) - label), grad);
    bce(logit, label)
}

/// One balanced minibatch: indices into the real and negative training sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub real: Vec<usize>,
    pub negative: Vec<usize>,
}

/// Shuffles both classes and pairs them into batches of `batch_size / 2`
/// real and as many negative examples. Leftovers of the larger class are
/// dropped for the epoch.
pub fn balanced_batches<R: Rng + ?Sized>(
    n_real: usize,
    n_negative: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Batch> {
    let mut real: Vec<usize> = (0..n_real).collect();
    let mut neg: Vec<usize> = (0..n_negative).collect();
    real.shuffle(rng);
    neg.shuffle(rng);
    let n = n_real.min(n_negative);
    let half = (batch_size / 2).max(1);
    let mut out = Vec::with_capacity(n.div_ceil(half));
    let mut start = 0;
    while start < n {
        let end = (start + half).min(n);
        out.push(Batch {
            real: real[start..end].to_vec(),
            negative: neg[start..end].to_vec(),
        });
        start = end;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub heldout_loss: f64,
    /// Class-balanced accuracy at threshold `d = 0.5`.
    pub heldout_accuracy: f64,
    pub train_examples: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedRatio {
    pub estimator: RatioEstimator,
    pub report: TrainReport,
}

#[derive(Debug, Clone)]
pub struct TrainedDual {
    pub estimator: PrefixRatioEstimator,
    pub report: TrainReport,
}

struct Split<'a> {
    train: Vec<&'a [TokenId]>,
    held: Vec<&'a [TokenId]>,
}

fn holdout_split<'a>(data: &'a [Sentence], fraction: f64, seed: u64) -> Split<'a> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream(seed, 0));
    let n_held = ((data.len() as f64 * fraction).floor() as usize).max(1);
    let held = idx[..n_held].iter().map(|&i| data[i].ids()).collect();
    let train = idx[n_held..].iter().map(|&i| data[i].ids()).collect();
    Split { train, held }
}

fn heldout_metrics(
    net: &Network,
    real: &[&[TokenId]],
    neg: &[&[TokenId]],
    obj: Objective,
) -> (f64, f64) {
    let class = |set: &[&[TokenId]], label: f64| {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for ids in set {
            let logits = net.prefix_logits(ids);
            let logit = logits[obj.select(&logits)];
            loss += bce(logit, label);
            if (logit > 0.0) == (label > 0.5) {
                correct += 1;
            }
        }
        let n = set.len().max(1) as f64;
        (loss / n, correct as f64 / n)
    };
    let (lr, ar) = class(real, 0.0);
    let (ln, an) = class(neg, 1.0);
    (0.5 * (lr + ln), 0.5 * (ar + an))
}

fn fit(
    real: &[Sentence],
    negatives: &[Sentence],
    vocab_size: usize,
    config: &TrainConfig,
    obj: Objective,
) -> Result<(Network, TrainReport)> {
    config.validate()?;
    if real.len() < config.min_real {
        return Err(Error::Precondition(format!(
            "need at least {} real sentences, got {}",
            config.min_real,
            real.len()
        )));
    }
    if negatives.len() < 2 {
        return Err(Error::Precondition(
            "need at least 2 negative sentences".into(),
        ));
    }
    for s in real.iter().chain(negatives) {
        if s.ids().iter().any(|&t| t as usize >= vocab_size) {
            return Err(Error::VocabMismatch(
                "token id outside estimator vocabulary".into(),
            ));
        }
    }

    let real_split = holdout_split(real, config.holdout_fraction, derive_seed(config.seed, 1));
    let neg_split = holdout_split(
        negatives,
        config.holdout_fraction,
        derive_seed(config.seed, 2),
    );
    let mut net = Network::init(
        config.arch(vocab_size),
        config.init_scale,
        &mut stream(derive_seed(config.seed, 3), 0),
    );
    let mut batch_rng = stream(derive_seed(config.seed, 4), 0);

    let (mut best_loss, mut best_acc) =
        heldout_metrics(&net, &real_split.held, &neg_split.held, obj);
    let mut best_params = net.params().to_vec();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut grad = vec![0.0; net.params().len()];

    for epoch in 1..=config.max_epochs {
        epochs_run = epoch;
        let batches = balanced_batches(
            real_split.train.len(),
            neg_split.train.len(),
            config.batch_size,
            &mut batch_rng,
        );
        for batch in &batches {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (batch.real.len() + batch.negative.len()) as f64;
            let mut loss = 0.0;
            for &i in &batch.real {
                loss += accumulate_grad(&net, real_split.train[i], 0.0, obj, scale, &mut grad);
            }
            for &i in &batch.negative {
                loss += accumulate_grad(&net, neg_split.train[i], 1.0, obj, scale, &mut grad);
            }
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}; try a smaller learning rate than {}",
                    config.learning_rate
                )));
            }
            for (p, g) in net.params_mut().iter_mut().zip(&grad) {
                *p -= config.learning_rate * g;
            }
        }
        let (loss, acc) = heldout_metrics(&net, &real_split.held, &neg_split.held, obj);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite held-out loss at epoch {epoch}; try a smaller learning rate than {}",
                config.learning_rate
            )));
        }
        if loss < best_loss {
            best_loss = loss;
            best_acc = acc;
            best_params.copy_from_slice(net.params());
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    net.params_mut().copy_from_slice(&best_params);
    Ok((
        net,
        TrainReport {
            epochs_run,
            best_epoch,
            heldout_loss: best_loss,
            heldout_accuracy: best_acc,
            train_examples: real_split.train.len() + neg_split.train.len(),
        },
    ))
}

/// Trains a full-sentence estimator separating `real` from `negatives`.
pub fn train_ratio_estimator(
    real: &[Sentence],
    negatives: &[Sentence],
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<TrainedRatio> {
    let (net, report) = fit(real, negatives, vocab_size, config, Objective::Full)?;
    Ok(TrainedRatio {
        estimator: RatioEstimator::new(net, config.gamma_max),
        report,
    })
}

/// Trains a prefix estimator through its dual form `max_i γ′(x_[1:i])`.
pub fn train_dual_estimator(
    real: &[Sentence],
    negatives: &[Sentence],
    vocab_size: usize,
    config: &TrainConfig,
) -> Result<TrainedDual> {
    let (net, report) = fit(real, negatives, vocab_size, config, Objective::Dual)?;
    Ok(TrainedDual {
        estimator: PrefixRatioEstimator::new(net, config.gamma_max),
        report,
    })
}
