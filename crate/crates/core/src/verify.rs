//! End-to-end oracle checks on an enumerable configuration.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;

use crate::corpus::{Sentence, TokenId};
use crate::error::Result;
use crate::fixtures::{enumerable_fixture, EnumerableFixture};
use crate::lm::LanguageModel;
use crate::metrics::{emd_lengths, emd_word_freq};
use crate::oracle::{
    chi_square_gof, dual_violation_rate, empirical, enumerate_model, exact_tailored, tv_distance,
    two_sample_chi_square, with_oracle_duals,
};
use crate::ratio::{build_stack, EstimatorStack, StackConfig, TrainConfig};
use crate::tailor::{
    ers_sample, estimate_log_normalizer, rejection_sample, smc_step_weights, SamplerConfig,
    TailoredDistribution,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{tag}  {:<28} {}", c.name, c.detail);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub n_is: usize,
    pub layers: usize,
    pub workers: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            seed: 0,
            n_samples: 1_000_000,
            n_is: 100_000,
            layers: 2,
            workers: 1,
        }
    }
}

/// Trains the stack used by the enumerable checks.
pub fn enumerable_stack(
    fx: &EnumerableFixture,
    layers: usize,
    seed: u64,
    workers: usize,
) -> Result<EstimatorStack> {
    let model: Arc<dyn LanguageModel> = Arc::new(fx.model.clone());
    let config = StackConfig {
        n_layers: layers,
        with_dual: true,
        max_len: fx.max_len,
        train: TrainConfig {
            max_epochs: 30,
            seed,
            ..TrainConfig::default()
        },
        sampler: SamplerConfig {
            workers,
            ..SamplerConfig::default()
        },
    };
    Ok(build_stack(model, &fx.real.sentences, &config)?.to_stack())
}

fn s(words: &[TokenId]) -> Sentence {
    Sentence::from_words(words.to_vec()).expect("no EOS in words")
}

/// Name, real, generated, EMD over lengths, EMD over word frequencies.
pub type EmdCase = (&'static str, Vec<Sentence>, Vec<Sentence>, f64, f64);

/// EMD fixtures with hand-computed values.
pub fn emd_fixtures() -> Vec<EmdCase> {
    let l = |lens: &[usize]| lens.iter().map(|&n| s(&vec![2; n])).collect::<Vec<_>>();
    vec![
        ("identical", l(&[1, 2, 3]), l(&[1, 2, 3]), 0.0, 0.0),
        ("unit shift", l(&[1]), l(&[2]), 1.0, 0.0),
        ("spread vs point", l(&[1, 3]), l(&[2, 2]), 1.0, 0.0),
        (
            "rank one vs uniform",
            vec![s(&[2, 3])],
            vec![s(&[2, 2])],
            0.0,
            0.5,
        ),
    ]
}

/// Runs every oracle check on the shipped enumerable fixture.
pub fn run_enumerable_suite(config: &VerifyConfig) -> Result<VerifyReport> {
    let fx = enumerable_fixture(config.seed);
    let stack = enumerable_stack(&fx, config.layers, config.seed, config.workers)?;
    run_suite(Arc::new(fx.model.clone()), &stack, fx.max_len, config)
}

/// Runs every oracle check for `model` tailored by `stack`.
pub fn run_suite(
    model: Arc<dyn LanguageModel>,
    stack: &EstimatorStack,
    max_len: usize,
    config: &VerifyConfig,
) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let v = model.vocab_size();
    let stack = stack.memoized();

    let base = enumerate_model(model.as_ref(), max_len)?;
    let total = base.total() + base.leftover_mass;
    report.push(
        "model mass",
        (total - 1.0).abs() < 1e-9 && base.leftover_mass < 1e-6,
        format!(
            "sum {total:.12}, leftover {:.3e}, truncated {:.4}",
            base.leftover_mass, base.truncated_mass
        ),
    );

    let exact = exact_tailored(model.as_ref(), &stack, max_len)?;
    let z = exact.z.expect("tailored has Z");
    let dominated = exact
        .entries
        .iter()
        .all(|(x, p)| *p <= base.prob(x) / z * (1.0 + 1e-12));
    report.push(
        "tailored normalizer",
        z > 0.0 && z <= 1.0 && dominated,
        format!("Z {z:.6}, pointwise bound {dominated}"),
    );

    let t = TailoredDistribution::new(model.clone(), stack.clone(), max_len);
    let sampler = SamplerConfig {
        workers: config.workers,
        ..SamplerConfig::default()
    };
    let rs = rejection_sample(&t, config.n_samples, config.seed, &sampler)?;
    let tv = tv_distance(&empirical(&rs.accepted), &exact.entries);
    let gof = chi_square_gof(&rs.accepted, &exact)?;
    report.push(
        "rejection sampling",
        tv < 0.01 && gof.p_value > 0.01,
        format!(
            "n {}, TV {tv:.5}, chi2 {:.1} dof {} p {:.4}",
            rs.accepted.len(),
            gof.statistic,
            gof.dof,
            gof.p_value
        ),
    );

    let oracle = with_oracle_duals(&stack, v, max_len)?;
    let to = TailoredDistribution::new(model.clone(), oracle, max_len);
    let ers = ers_sample(&to, config.n_samples, config.seed ^ 0xe5, &sampler)?;
    let two = two_sample_chi_square(&ers.accepted, &rs.accepted)?;
    report.push(
        "early rejection (oracle)",
        two.p_value > 0.01,
        format!(
            "chi2 {:.1} dof {} p {:.4}, kills {}",
            two.statistic, two.dof, two.p_value, ers.stats.early_kills
        ),
    );

    let mut ti = t.clone();
    let (log_z, se) =
        estimate_log_normalizer(&mut ti, config.n_is, config.seed ^ 0x15, config.workers)?;
    let dev = (log_z - z.ln()).abs();
    report.push(
        "log normalizer",
        dev <= 3.0 * se,
        format!("estimate {log_z:.5} exact {:.5} se {se:.2e}", z.ln()),
    );

    let telescoped = exact.entries.keys().all(|x| {
        let w: f64 = smc_step_weights(&stack, x.ids()).iter().product();
        let expected = stack.prefix_bound(&[]) / stack.prefix_bound(x.ids());
        (w - expected).abs() <= 1e-9 * expected
    });
    report.push(
        "smc weight product",
        telescoped,
        format!("{} paths", exact.len()),
    );

    let emd_ok = emd_fixtures().iter().all(|(_, a, b, l, f)| {
        emd_lengths(a, b).ok() == Some(*l) && emd_word_freq(a, b).ok() == Some(*f)
    });
    report.push(
        "emd fixtures",
        emd_ok,
        format!("{} fixtures", emd_fixtures().len()),
    );

    if stack.has_duals() {
        let rate = dual_violation_rate(&stack, v, max_len, 1e-9)?;
        report.push(
            "learned prefix bound",
            true,
            format!(
                "violates exact prefix minimum on {:.1}% of prefixes",
                100.0 * rate
            ),
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_small_run() {
        let cfg = VerifyConfig {
            n_samples: 300_000,
            n_is: 20_000,
            layers: 1,
            ..VerifyConfig::default()
        };
        let report = run_enumerable_suite(&cfg).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert!(report.to_text().starts_with("PASS"));
    }
}
