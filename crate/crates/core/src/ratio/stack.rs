//! Training and storing estimator stacks.
//!
//! Layer `k` is trained on real data against fresh negatives drawn by
//! rejection sampling from the distribution tailored by layers `0..k`.
//!
//! On disk a stack is a directory holding `stack.txt` and, per layer,
//! `layer{k}.ratio.mcre` plus an optional `layer{k}.dual.mcre`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::file::{load_estimator_file, EstimatorFile};
use super::train::{
    train_dual_estimator, train_ratio_estimator, TrainConfig, TrainedDual, TrainedRatio,
};
use super::{EstimatorStack, PrefixRatio, SentenceRatio, StackLayer};
use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::rng::derive_seed;
use crate::tailor::{rejection_sample, SamplerConfig, TailoredDistribution};

const MANIFEST: &str = "stack.txt";

/// Seed used for everything random in layer `k`.
pub fn layer_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, 0x5eed_0000 + k as u64)
}

#[derive(Debug, Clone)]
pub struct TrainedLayer {
    pub ratio: TrainedRatio,
    pub dual: Option<TrainedDual>,
    /// Acceptance rate of the rejection sampler that produced the negatives.
    pub negative_acceptance: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainedStack {
    pub layers: Vec<TrainedLayer>,
}

impl TrainedStack {
    pub fn to_stack(&self) -> EstimatorStack {
        EstimatorStack::new(
            self.layers
                .iter()
                .map(|l| {
                    let full: Arc<dyn SentenceRatio> = Arc::new(l.ratio.estimator.clone());
                    let dual = l
                        .dual
                        .as_ref()
                        .map(|d| Arc::new(d.estimator.clone()) as Arc<dyn PrefixRatio>);
                    StackLayer::new(full, dual)
                })
                .collect(),
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "layers = {}", self.layers.len());
        for (k, l) in self.layers.iter().enumerate() {
            EstimatorFile::Sentence(l.ratio.estimator.clone())
                .save(dir.join(format!("layer{k}.ratio.mcre")))?;
            if let Some(d) = &l.dual {
                EstimatorFile::Prefix(d.estimator.clone())
                    .save(dir.join(format!("layer{k}.dual.mcre")))?;
            }
            let r = &l.ratio.report;
            let _ = writeln!(
                manifest,
                "layer{k} = dual:{} heldout_accuracy:{:.4} heldout_loss:{:.4} negative_acceptance:{:.6}",
                l.dual.is_some(),
                r.heldout_accuracy,
                r.heldout_loss,
                l.negative_acceptance
            );
        }
        let path = dir.join(MANIFEST);
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }
}

/// Loads a stack directory written by [`TrainedStack::save`].
pub fn load_stack(dir: impl AsRef<Path>) -> Result<EstimatorStack> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let n: usize = text
        .lines()
        .find_map(|l| l.strip_prefix("layers = "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("{}: missing layer count", path.display())))?;
    let mut stack = EstimatorStack::empty();
    for k in 0..n {
        let full: Arc<dyn SentenceRatio> =
            match load_estimator_file(dir.join(format!("layer{k}.ratio.mcre")))? {
                EstimatorFile::Sentence(e) => Arc::new(e),
                EstimatorFile::Prefix(_) => {
                    return Err(Error::Format(format!(
                        "layer{k}.ratio.mcre holds a prefix estimator"
                    )))
                }
            };
        let dual_path = dir.join(format!("layer{k}.dual.mcre"));
        let dual: Option<Arc<dyn PrefixRatio>> = if dual_path.exists() {
            match load_estimator_file(&dual_path)? {
                EstimatorFile::Prefix(e) => Some(Arc::new(e)),
                EstimatorFile::Sentence(_) => {
                    return Err(Error::Format(format!(
                        "layer{k}.dual.mcre holds a sentence estimator"
                    )))
                }
            }
        } else {
            None
        };
        stack.push(StackLayer::new(full, dual));
    }
    Ok(stack)
}

#[derive(Debug, Clone)]
pub struct StackConfig {
    pub n_layers: usize,
    pub with_dual: bool,
    pub max_len: usize,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig {
            n_layers: 3,
            with_dual: true,
            max_len: 32,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Trains `config.n_layers` layers against `real`.
///
/// Each layer sees `|real|` negatives. Fails with [`Error::Starvation`] if the
/// rejection sampler cannot collect them within its budget.
pub fn build_stack(
    model: Arc<dyn LanguageModel>,
    real: &[Sentence],
    config: &StackConfig,
) -> Result<TrainedStack> {
    if config.n_layers == 0 {
        return Err(Error::InvalidArgument("need at least one layer".into()));
    }
    config.train.validate()?;
    let vocab_size = model.vocab_size();
    let mut trained = TrainedStack::default();
    for k in 0..config.n_layers {
        let seed = layer_seed(config.train.seed, k);
        let tailored = TailoredDistribution::new(model.clone(), trained.to_stack(), config.max_len);
        let batch = rejection_sample(&tailored, real.len(), seed, &config.sampler)?;
        if batch.stats.budget_exhausted {
            return Err(Error::Starvation(format!(
                "layer {k}: only {} of {} negatives after {} proposals",
                batch.accepted.len(),
                real.len(),
                batch.stats.proposals
            )));
        }
        let train_cfg = TrainConfig {
            seed: derive_seed(seed, 1),
            ..config.train.clone()
        };
        let ratio = train_ratio_estimator(real, &batch.accepted, vocab_size, &train_cfg)?;
        let dual = if config.with_dual {
            let dual_cfg = TrainConfig {
                seed: derive_seed(seed, 2),
                ..config.train.clone()
            };
            Some(train_dual_estimator(
                real,
                &batch.accepted,
                vocab_size,
                &dual_cfg,
            )?)
        } else {
            None
        };
        trained.layers.push(TrainedLayer {
            ratio,
            dual,
            negative_acceptance: batch.stats.acceptance_rate(),
        });
    }
    Ok(trained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenId;
    use crate::lm::{sample_sentence, UnigramModel};
    use crate::rng::stream;

    fn setup() -> (Arc<dyn LanguageModel>, Vec<Sentence>) {
        let model: Arc<dyn LanguageModel> =
            Arc::new(UnigramModel::new(vec![0.05, 0.25, 0.35, 0.35]).unwrap());
        // real data never uses token 3
        let real_model = UnigramModel::new(vec![0.05, 0.3, 0.65, 0.0]).unwrap();
        let real = (0..400)
            .map(|j| sample_sentence(&real_model, &mut stream(77, j), 6))
            .collect();
        (model, real)
    }

    fn small_config(n_layers: usize) -> StackConfig {
        StackConfig {
            n_layers,
            with_dual: true,
            max_len: 6,
            train: TrainConfig {
                max_epochs: 15,
                seed: 3,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
        }
    }

    #[test]
    fn layer_seeds_differ() {
        assert_ne!(layer_seed(1, 0), layer_seed(1, 1));
        assert_eq!(layer_seed(1, 2), layer_seed(1, 2));
    }

    #[test]
    fn stack_learns_to_penalize_foreign_token() {
        let (model, real) = setup();
        let trained = build_stack(model, &real, &small_config(2)).unwrap();
        assert_eq!(trained.layers.len(), 2);
        assert!(trained.layers[0].ratio.report.heldout_accuracy > 0.6);
        let stack = trained.to_stack();
        assert!(stack.has_duals());
        let bad: Vec<TokenId> = vec![3, 3, 3, 1];
        let good: Vec<TokenId> = vec![2, 2, 1];
        assert!(stack.rejection_bound(&bad) > stack.rejection_bound(&good));
    }

    #[test]
    fn save_and_load_round_trip() {
        let (model, real) = setup();
        let trained = build_stack(model, &real, &small_config(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        trained.save(dir.path()).unwrap();
        let loaded = load_stack(dir.path()).unwrap();
        let stack = trained.to_stack();
        for ids in [vec![2, 1], vec![3, 2, 3, 1], vec![1]] {
            assert_eq!(
                stack.rejection_bound(&ids).to_bits(),
                loaded.rejection_bound(&ids).to_bits()
            );
            assert_eq!(
                stack.prefix_bound(&ids).to_bits(),
                loaded.prefix_bound(&ids).to_bits()
            );
        }
        assert!(load_stack(dir.path().join("missing")).is_err());
    }

    #[test]
    fn starvation_reported() {
        let (model, real) = setup();
        let mut cfg = small_config(2);
        cfg.sampler.budget = real.len() as u64;
        let err = build_stack(model, &real, &cfg).unwrap_err();
        assert!(matches!(err, Error::Starvation(_)));
    }
}
