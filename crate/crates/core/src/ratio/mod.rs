//! Density-ratio estimators.
//!
//! A [`RatioEstimator`] scores whole sentences (`EOS` included) with
//! `γ(x) = d(x) / (1 − d(x))`, where `d` is a classifier's probability that
//! `x` came from the model rather than from real data. A
//! [`PrefixRatioEstimator`] scores prefixes with `γ′(x_[1:i])`, trained through
//! its dual form `γ″(x) = max_i γ′(x_[1:i])` so that `γ′` tracks the smallest
//! full-sentence ratio reachable from the prefix. An [`EstimatorStack`]
//! composes several layers, each trained against the distribution tailored by
//! the layers before it.
//!
//! All ratios are clamped to `[1/γ_max, γ_max]` by clamping the logit.

mod cnn;
mod file;
mod stack;
mod train;

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

pub use cnn::{bce, sigmoid, softplus, Arch, ConvSpec, Forward, Network};
pub use file::{load_estimator_file, EstimatorFile, EstimatorKind};
pub use stack::{build_stack, layer_seed, load_stack, StackConfig, TrainedLayer, TrainedStack};
pub use train::{
    balanced_batches, example_loss, example_loss_and_grad, train_dual_estimator,
    train_ratio_estimator, Batch, Objective, TrainConfig, TrainReport, TrainedDual, TrainedRatio,
};

use crate::corpus::TokenId;

pub const DEFAULT_GAMMA_MAX: f64 = 20.0;

/// Full-sentence ratio `γ(x)`; `ids` include the terminal `EOS`.
pub trait SentenceRatio: Send + Sync {
    fn gamma(&self, ids: &[TokenId]) -> f64;
}

/// Prefix ratio `γ′(prefix)`; the prefix may end in `EOS` for the final step.
pub trait PrefixRatio: Send + Sync {
    fn gamma_prefix(&self, prefix: &[TokenId]) -> f64;

    /// `γ′` of every prefix of `ids`, index `i` covering the first `i` tokens.
    fn gamma_all_prefixes(&self, ids: &[TokenId]) -> Vec<f64> {
        (0..=ids.len())
            .map(|i| self.gamma_prefix(&ids[..i]))
            .collect()
    }
}

/// Clamps a logit to `[−ln γ_max, ln γ_max]`.
pub fn clamp_logit(logit: f64, gamma_max: f64) -> f64 {
    let bound = gamma_max.ln();
    logit.clamp(-bound, bound)
}

/// `γ = d / (1 − d)` with the logit clamp applied.
pub fn gamma_from_probability(d: f64, gamma_max: f64) -> f64 {
    let logit = if d <= 0.0 {
        f64::NEG_INFINITY
    } else if d >= 1.0 {
        f64::INFINITY
    } else {
        (d / (1.0 - d)).ln()
    };
    clamp_logit(logit, gamma_max).exp()
}

/// Convolutional full-sentence estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioEstimator {
    net: Network,
    gamma_max: f64,
}

impl RatioEstimator {
    pub fn new(net: Network, gamma_max: f64) -> Self {
        RatioEstimator { net, gamma_max }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    /// Unclamped classifier logit.
    pub fn logit(&self, ids: &[TokenId]) -> f64 {
        self.net.logit(ids)
    }

    /// Classifier output `d(x)` after clamping.
    pub fn probability(&self, ids: &[TokenId]) -> f64 {
        sigmoid(clamp_logit(self.logit(ids), self.gamma_max))
    }
}

impl SentenceRatio for RatioEstimator {
    fn gamma(&self, ids: &[TokenId]) -> f64 {
        clamp_logit(self.logit(ids), self.gamma_max).exp()
    }
}

/// Convolutional prefix estimator: `γ′ = exp(s_θ(prefix))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixRatioEstimator {
    net: Network,
    gamma_max: f64,
}

impl PrefixRatioEstimator {
    pub fn new(net: Network, gamma_max: f64) -> Self {
        PrefixRatioEstimator { net, gamma_max }
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    /// Unclamped score `s_θ(prefix)`.
    pub fn score(&self, prefix: &[TokenId]) -> f64 {
        self.net.logit(prefix)
    }

    /// Dual form `γ″(x) = max_{i ≥ 1} γ′(x_[1:i])`.
    pub fn dual_gamma(&self, ids: &[TokenId]) -> f64 {
        self.gamma_all_prefixes(ids)[1..]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

impl PrefixRatio for PrefixRatioEstimator {
    fn gamma_prefix(&self, prefix: &[TokenId]) -> f64 {
        clamp_logit(self.net.logit(prefix), self.gamma_max).exp()
    }

    fn gamma_all_prefixes(&self, ids: &[TokenId]) -> Vec<f64> {
        self.net
            .prefix_logits(ids)
            .into_iter()
            .map(|l| clamp_logit(l, self.gamma_max).exp())
            .collect()
    }
}

/// The same ratio everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantRatio(pub f64);

impl SentenceRatio for ConstantRatio {
    fn gamma(&self, _ids: &[TokenId]) -> f64 {
        self.0
    }
}

impl PrefixRatio for ConstantRatio {
    fn gamma_prefix(&self, _prefix: &[TokenId]) -> f64 {
        self.0
    }
}

/// Ratio given by a closure.
pub struct FnRatio<F>(pub F);

impl<F> SentenceRatio for FnRatio<F>
where
    F: Fn(&[TokenId]) -> f64 + Send + Sync,
{
    fn gamma(&self, ids: &[TokenId]) -> f64 {
        (self.0)(ids)
    }
}

impl<F> PrefixRatio for FnRatio<F>
where
    F: Fn(&[TokenId]) -> f64 + Send + Sync,
{
    fn gamma_prefix(&self, prefix: &[TokenId]) -> f64 {
        (self.0)(prefix)
    }
}

/// Caches another ratio by input sequence. Worth it when the support is
/// small, as in enumerable configurations.
pub struct Memoized<R: ?Sized> {
    inner: Arc<R>,
    cache: RwLock<HashMap<Vec<TokenId>, f64>>,
}

impl<R: ?Sized> Memoized<R> {
    pub fn new(inner: Arc<R>) -> Self {
        Memoized {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn get_or(&self, ids: &[TokenId], f: impl FnOnce() -> f64) -> f64 {
        if let Some(&v) = self.cache.read().expect("cache lock").get(ids) {
            return v;
        }
        let v = f();
        self.cache
            .write()
            .expect("cache lock")
            .insert(ids.to_vec(), v);
        v
    }
}

impl<R: SentenceRatio + ?Sized> SentenceRatio for Memoized<R> {
    fn gamma(&self, ids: &[TokenId]) -> f64 {
        self.get_or(ids, || self.inner.gamma(ids))
    }
}

impl<R: PrefixRatio + ?Sized> PrefixRatio for Memoized<R> {
    fn gamma_prefix(&self, prefix: &[TokenId]) -> f64 {
        self.get_or(prefix, || self.inner.gamma_prefix(prefix))
    }
}

#[derive(Clone)]
pub struct StackLayer {
    pub full: Arc<dyn SentenceRatio>,
    pub dual: Option<Arc<dyn PrefixRatio>>,
}

impl StackLayer {
    pub fn new(full: Arc<dyn SentenceRatio>, dual: Option<Arc<dyn PrefixRatio>>) -> Self {
        StackLayer { full, dual }
    }
}

/// Ordered layers `γ_0 … γ_n`, each optionally paired with a prefix estimator.
#[derive(Clone, Default)]
pub struct EstimatorStack {
    layers: Vec<StackLayer>,
}

impl std::fmt::Debug for EstimatorStack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EstimatorStack")
            .field("layers", &self.layers.len())
            .field("has_duals", &self.has_duals())
            .finish()
    }
}

impl EstimatorStack {
    pub fn new(layers: Vec<StackLayer>) -> Self {
        EstimatorStack { layers }
    }

    /// A stack with no layers tailors nothing.
    pub fn empty() -> Self {
        EstimatorStack::default()
    }

    pub fn push(&mut self, layer: StackLayer) {
        self.layers.push(layer);
    }

    pub fn layers(&self) -> &[StackLayer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// First `n` layers.
    pub fn truncated(&self, n: usize) -> Self {
        EstimatorStack {
            layers: self.layers[..n.min(self.layers.len())].to_vec(),
        }
    }

    /// True when every layer carries a prefix estimator.
    pub fn has_duals(&self) -> bool {
        self.layers.iter().all(|l| l.dual.is_some())
    }

    /// Per-layer `γ_k(x)`.
    pub fn gammas(&self, ids: &[TokenId]) -> Vec<f64> {
        self.layers.iter().map(|l| l.full.gamma(ids)).collect()
    }

    /// `a(x) = Π_k 1 / max(γ_k(x), 1)`.
    pub fn acceptance_prob(&self, ids: &[TokenId]) -> f64 {
        1.0 / self.rejection_bound(ids)
    }

    /// `Π_k max(γ_k(x), 1) = 1 / a(x)`.
    pub fn rejection_bound(&self, ids: &[TokenId]) -> f64 {
        self.layers
            .iter()
            .map(|l| l.full.gamma(ids).max(1.0))
            .product()
    }

    /// Raw composite `Π_k γ_k(x)`.
    pub fn composite_gamma(&self, ids: &[TokenId]) -> f64 {
        self.layers.iter().map(|l| l.full.gamma(ids)).product()
    }

    /// Composite prefix bound `Π_k max(γ′_k(prefix), 1)`; layers without a
    /// prefix estimator contribute 1.
    pub fn prefix_bound(&self, prefix: &[TokenId]) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.dual.as_ref())
            .map(|d| d.gamma_prefix(prefix).max(1.0))
            .product()
    }

    /// Wraps every estimator in a [`Memoized`] cache.
    pub fn memoized(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| StackLayer {
                full: Arc::new(Memoized::new(l.full.clone())) as Arc<dyn SentenceRatio>,
                dual: l
                    .dual
                    .as_ref()
                    .map(|d| Arc::new(Memoized::new(d.clone())) as Arc<dyn PrefixRatio>),
            })
            .collect();
        EstimatorStack { layers }
    }

    /// Replaces every layer's prefix estimator.
    pub fn with_duals(&self, duals: Vec<Arc<dyn PrefixRatio>>) -> Self {
        assert_eq!(
            duals.len(),
            self.layers.len(),
            "one prefix estimator per layer"
        );
        let layers = self
            .layers
            .iter()
            .zip(duals)
            .map(|(l, d)| StackLayer {
                full: l.full.clone(),
                dual: Some(d),
            })
            .collect();
        EstimatorStack { layers }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gamma_from_classifier_output() {
        assert!((gamma_from_probability(0.5, 20.0) - 1.0).abs() < 1e-15);
        assert!((gamma_from_probability(0.8, 20.0) - 4.0).abs() < 1e-12);
        assert!((gamma_from_probability(1.0 - 1e-12, 20.0) - 20.0).abs() < 1e-12);
        assert!((gamma_from_probability(1e-12, 20.0) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn estimator_gamma_is_clamped_and_deterministic() {
        let mut net = Network::init(Arch::standard(6), 1.0, &mut stream(1, 0));
        let n = net.params().len();
        net.params_mut()[n - 1] = 50.0;
        let est = RatioEstimator::new(net.clone(), 20.0);
        assert!((est.gamma(&[2, 3, 1]) - 20.0).abs() < 1e-12);
        assert_eq!(est.gamma(&[2, 3, 1]), est.gamma(&[2, 3, 1]));
        net.params_mut()[n - 1] = -50.0;
        let est = PrefixRatioEstimator::new(net, 20.0);
        assert!((est.gamma_prefix(&[2]) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn prefix_estimator_matches_exp_score() {
        let net = Network::init(Arch::standard(6), 0.3, &mut stream(2, 0));
        let est = PrefixRatioEstimator::new(net, 20.0);
        let ids = [2, 4, 5, 3, 1];
        let all = est.gamma_all_prefixes(&ids);
        for i in 0..=ids.len() {
            let direct = clamp_logit(est.score(&ids[..i]), 20.0).exp();
            assert_eq!(all[i], direct);
            assert_eq!(est.gamma_prefix(&ids[..i]), direct);
        }
        // empty prefix is the same constant whatever follows
        assert_eq!(est.gamma_prefix(&[]), est.gamma_all_prefixes(&[3, 1])[0]);
    }

    #[test]
    fn dual_gamma_is_max_over_prefixes() {
        let net = Network::init(Arch::standard(6), 1.0, &mut stream(3, 0));
        let est = PrefixRatioEstimator::new(net, 20.0);
        let mut rng = stream(3, 1);
        for _ in 0..1000 {
            use rand::Rng;
            let len = rng.random_range(0..6);
            let mut ids: Vec<TokenId> = (0..len).map(|_| rng.random_range(2..6)).collect();
            ids.push(1);
            let scan = (1..=ids.len())
                .map(|i| est.gamma_prefix(&ids[..i]))
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(est.dual_gamma(&ids), scan);
            // running max is non-decreasing
            let all = est.gamma_all_prefixes(&ids);
            let mut run = f64::NEG_INFINITY;
            for g in &all[1..] {
                let next = run.max(*g);
                assert!(next >= run);
                run = next;
            }
            assert_eq!(run, scan);
        }
        // one prefix only
        assert_eq!(est.dual_gamma(&[1]), est.gamma_prefix(&[1]));
    }

    #[test]
    fn composite_acceptance() {
        let stack = |gs: &[f64]| {
            EstimatorStack::new(
                gs.iter()
                    .map(|&g| StackLayer::new(Arc::new(ConstantRatio(g)), None))
                    .collect(),
            )
        };
        assert_eq!(stack(&[2.0]).acceptance_prob(&[1]), 0.5);
        assert_eq!(stack(&[0.5, 1.0, 0.9]).acceptance_prob(&[1]), 1.0);
        assert!((stack(&[2.0, 1.25]).acceptance_prob(&[1]) - 0.4).abs() < 1e-15);
        assert_eq!(stack(&[]).acceptance_prob(&[1]), 1.0);
    }

    #[test]
    fn memoized_returns_inner_values() {
        let inner: Arc<dyn SentenceRatio> = Arc::new(FnRatio(|ids: &[TokenId]| ids.len() as f64));
        let m = Memoized::new(inner);
        assert_eq!(m.gamma(&[2, 1]), 2.0);
        assert_eq!(m.gamma(&[2, 1]), 2.0);
        assert_eq!(m.gamma(&[2, 3, 1]), 3.0);
    }
}
