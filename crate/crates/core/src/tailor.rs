//! The tailored distribution `P_tailor(x) ∝ P_model(x) · Π_k 1/max(γ_k(x), 1)`
//! and three ways to sample from it.
//!
//! * [`rejection_sample`] proposes whole sentences from the model and accepts
//!   each with probability `a(x)`.
//! * [`smc_sample`] advances a population of particles token by token and
//!   resamples after every step with weights `γ′(x_[1:i−1]) / γ′(x_[1:i])`.
//! * [`ers_sample`] draws a threshold `r` per particle at birth and kills the
//!   particle as soon as its prefix bound exceeds `1/r`.
//!
//! Rejection and early rejection sampling give each proposal its own random
//! stream addressed by `(seed, index)` and merge results in index order, so
//! the output is the same for any worker count.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Sentence, TokenId, EOS};
use crate::error::{Error, Result};
use crate::lm::{sample_sentence, sentence_logprob_capped, LanguageModel};
use crate::ratio::EstimatorStack;
use crate::rng::{categorical, open_unit, stream};

pub const DEFAULT_BUDGET: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Proposal budget for rejection and early rejection sampling.
    pub budget: u64,
    /// Worker threads; 1 runs everything on the calling thread.
    pub workers: usize,
    /// Early rejection re-checks the full-sentence ratio at `EOS`.
    pub final_check: bool,
    /// Abort with [`Error::Starvation`] when the acceptance rate falls below
    /// this value after at least 10⁴ proposals.
    pub starvation_rate: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            budget: DEFAULT_BUDGET,
            workers: 1,
            final_check: true,
            starvation_rate: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Rs,
    Smc,
    Ers,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rs" => Ok(Algorithm::Rs),
            "smc" => Ok(Algorithm::Smc),
            "ers" => Ok(Algorithm::Ers),
            other => Err(Error::InvalidArgument(format!(
                "unknown sampler {other:?} (expected rs, smc or ers)"
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Rs => "rs",
            Algorithm::Smc => "smc",
            Algorithm::Ers => "ers",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalizer {
    pub log_z: f64,
    pub stderr: f64,
}

#[derive(Clone)]
pub struct TailoredDistribution {
    pub model: Arc<dyn LanguageModel>,
    pub stack: EstimatorStack,
    pub max_len: usize,
    pub log_z: Option<LogNormalizer>,
}

impl std::fmt::Debug for TailoredDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TailoredDistribution")
            .field("stack", &self.stack)
            .field("max_len", &self.max_len)
            .field("log_z", &self.log_z)
            .finish()
    }
}

impl TailoredDistribution {
    pub fn new(model: Arc<dyn LanguageModel>, stack: EstimatorStack, max_len: usize) -> Self {
        TailoredDistribution {
            model,
            stack,
            max_len,
            log_z: None,
        }
    }

    /// Unnormalized density `P_model(x) · a(x)` under the forced-`EOS` cap.
    pub fn unnormalized(&self, s: &Sentence) -> f64 {
        (sentence_logprob_capped(self.model.as_ref(), s, self.max_len)).exp()
            * acceptance_prob(&self.stack, s)
    }

    pub fn with_log_normalizer(mut self, log_z: f64, stderr: f64) -> Self {
        self.log_z = Some(LogNormalizer { log_z, stderr });
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SampleStats {
    pub proposals: u64,
    pub accepted: u64,
    pub token_steps_total: u64,
    /// Steps spent on particles that were rejected, killed or not selected.
    pub token_steps_wasted: u64,
    pub distinct_fraction: f64,
    #[serde(rename = "log_Z")]
    pub log_z: Option<f64>,
    #[serde(rename = "log_Z_stderr")]
    pub log_z_stderr: Option<f64>,
    /// Particles killed before reaching `EOS` (early rejection only).
    pub early_kills: u64,
    pub budget_exhausted: bool,
}

impl SampleStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    /// Human-readable `key = value` block.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| format!("{x}"));
        let mut s = String::new();
        let _ = writeln!(s, "proposals = {}", self.proposals);
        let _ = writeln!(s, "accepted = {}", self.accepted);
        let _ = writeln!(s, "acceptance_rate = {}", self.acceptance_rate());
        let _ = writeln!(s, "token_steps_total = {}", self.token_steps_total);
        let _ = writeln!(s, "token_steps_wasted = {}", self.token_steps_wasted);
        let _ = writeln!(s, "early_kills = {}", self.early_kills);
        let _ = writeln!(s, "distinct_fraction = {}", self.distinct_fraction);
        let _ = writeln!(s, "log_Z = {}", opt(self.log_z));
        let _ = writeln!(s, "log_Z_stderr = {}", opt(self.log_z_stderr));
        let _ = writeln!(s, "budget_exhausted = {}", self.budget_exhausted);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub accepted: Vec<Sentence>,
    pub stats: SampleStats,
}

/// `|unique| / |all|`, 0 for an empty list.
pub fn distinct_fraction(sentences: &[Sentence]) -> f64 {
    if sentences.is_empty() {
        return 0.0;
    }
    let unique: HashSet<&Sentence> = sentences.iter().collect();
    unique.len() as f64 / sentences.len() as f64
}

/// `a(x) = Π_k 1/max(γ_k(x), 1)`.
pub fn acceptance_prob(stack: &EstimatorStack, s: &Sentence) -> f64 {
    stack.acceptance_prob(s.ids())
}

/// Acceptance test shared by every sampler: `r ≤ 1/bound`.
#[inline]
pub fn accepts(bound: f64, r: f64) -> bool {
    bound * r <= 1.0
}

/// Early-kill test: the prefix bound exceeds `1/r`.
#[inline]
pub fn kills(prefix_bound: f64, r: f64) -> bool {
    prefix_bound * r > 1.0
}

struct Outcome {
    sentence: Option<Sentence>,
    steps: u64,
    killed: bool,
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn map_indices<T, F>(start: u64, count: u64, parallel: bool, f: &F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    if parallel {
        (start..start + count).into_par_iter().map(f).collect()
    } else {
        (start..start + count).map(f).collect()
    }
}

/// Runs independent proposals in index order until `n_accept` acceptances.
fn drive<F>(n_accept: usize, config: &SamplerConfig, propose: F) -> Result<SampleBatch>
where
    F: Fn(u64) -> Outcome + Sync,
{
    let parallel = config.workers > 1;
    with_pool(config.workers, || {
        let mut batch = SampleBatch::default();
        let mut next: u64 = 0;
        while batch.accepted.len() < n_accept && next < config.budget {
            let remaining = (n_accept - batch.accepted.len()) as f64;
            let rate = if batch.stats.proposals > 0 {
                (batch.stats.accepted as f64 / batch.stats.proposals as f64).max(1e-3)
            } else {
                1.0
            };
            let want = (remaining / rate * 1.1).ceil().clamp(64.0, 65_536.0) as u64;
            let count = want.min(config.budget - next);
            let outcomes = map_indices(next, count, parallel, &propose);
            next += count;
            for o in outcomes {
                let stats = &mut batch.stats;
                stats.proposals += 1;
                stats.token_steps_total += o.steps;
                if o.killed {
                    stats.early_kills += 1;
                }
                match o.sentence {
                    Some(s) => {
                        stats.accepted += 1;
                        batch.accepted.push(s);
                        if batch.accepted.len() == n_accept {
                            break;
                        }
                    }
                    None => stats.token_steps_wasted += o.steps,
                }
            }
            if let Some(min_rate) = config.starvation_rate {
                if batch.stats.proposals >= 10_000 && batch.stats.acceptance_rate() < min_rate {
                    return Err(Error::Starvation(format!(
                        "acceptance rate {:.2e} after {} proposals is below {min_rate:.0e}",
                        batch.stats.acceptance_rate(),
                        batch.stats.proposals
                    )));
                }
            }
        }
        batch.stats.budget_exhausted = batch.accepted.len() < n_accept;
        batch.stats.distinct_fraction = distinct_fraction(&batch.accepted);
        Ok(batch)
    })
}

fn attach_normalizer(t: &TailoredDistribution, stats: &mut SampleStats) {
    if let Some(n) = t.log_z {
        stats.log_z = Some(n.log_z);
        stats.log_z_stderr = Some(n.stderr);
    }
}

/// Proposes from the model and accepts with probability `a(x)`.
///
/// Stops after `n_accept` acceptances or when the proposal budget runs out;
/// in the latter case the batch is partial and `budget_exhausted` is set.
pub fn rejection_sample(
    t: &TailoredDistribution,
    n_accept: usize,
    seed: u64,
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    if n_accept == 0 {
        return Err(Error::InvalidArgument("n_accept must be at least 1".into()));
    }
    let model = t.model.as_ref();
    let mut batch = drive(n_accept, config, |j| {
        let mut rng = stream(seed, j);
        let x = sample_sentence(model, &mut rng, t.max_len);
        let r = open_unit(&mut rng);
        let steps = x.len() as u64;
        let ok = accepts(t.stack.rejection_bound(x.ids()), r);
        Outcome {
            sentence: ok.then_some(x),
            steps,
            killed: false,
        }
    })?;
    attach_normalizer(t, &mut batch.stats);
    Ok(batch)
}

/// One early-rejection particle with threshold `1/r`.
///
/// Returns the accepted sentence (if any), the token steps spent and whether
/// the particle was killed before finishing.
pub fn ers_particle<R: rand::Rng + ?Sized>(
    t: &TailoredDistribution,
    rng: &mut R,
    r: f64,
    final_check: bool,
) -> (Option<Sentence>, u64, bool) {
    let mut ids: Vec<TokenId> = Vec::with_capacity(t.max_len + 1);
    let mut dist = Vec::with_capacity(t.model.vocab_size());
    let mut steps = 0u64;
    loop {
        let token = if ids.len() == t.max_len {
            EOS
        } else {
            t.model.next_dist_into(&ids, &mut dist);
            categorical(rng, &dist) as TokenId
        };
        ids.push(token);
        steps += 1;
        if kills(t.stack.prefix_bound(&ids), r) {
            return (None, steps, token != EOS);
        }
        if token == EOS {
            break;
        }
    }
    if final_check && !accepts(t.stack.rejection_bound(&ids), r) {
        return (None, steps, false);
    }
    let s = Sentence::new(ids).expect("single terminal EOS");
    (Some(s), steps, false)
}

/// Early rejection sampling. Needs a prefix estimator on every layer.
pub fn ers_sample(
    t: &TailoredDistribution,
    n_accept: usize,
    seed: u64,
    config: &SamplerConfig,
) -> Result<SampleBatch> {
    if n_accept == 0 {
        return Err(Error::InvalidArgument("n_accept must be at least 1".into()));
    }
    if !t.stack.has_duals() {
        return Err(Error::Precondition(
            "early rejection sampling needs a prefix estimator on every layer".into(),
        ));
    }
    let mut batch = drive(n_accept, config, |j| {
        let mut rng = stream(seed, j);
        let r = open_unit(&mut rng);
        let (sentence, steps, killed) = ers_particle(t, &mut rng, r, config.final_check);
        Outcome {
            sentence,
            steps,
            killed,
        }
    })?;
    attach_normalizer(t, &mut batch.stats);
    Ok(batch)
}

struct SmcParticle {
    ids: Vec<TokenId>,
    bound: f64,
    weight: f64,
}

fn multinomial<R: rand::Rng + ?Sized>(rng: &mut R, weights: &[f64], n: usize) -> Vec<usize> {
    let mut cum = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cum.push(acc);
    }
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>() * acc;
            cum.partition_point(|&c| c <= u).min(weights.len() - 1)
        })
        .collect()
}

/// Sequential Monte Carlo with resampling after every token.
///
/// Each unfinished particle takes one token per step and is reweighted by
/// `g(x_[1:i−1]) / g(x_[1:i])`, where `g` is the composite prefix bound.
/// Particles that emit `EOS` are frozen with their weight; the others are
/// resampled multinomially among themselves, keeping their total weight.
/// At the end all finished particles are resampled to `n_particles`
/// equally weighted outputs.
pub fn smc_sample(t: &TailoredDistribution, n_particles: usize, seed: u64) -> Result<SampleBatch> {
    if n_particles < 2 {
        return Err(Error::InvalidArgument(
            "SMC needs at least 2 particles".into(),
        ));
    }
    if !t.stack.has_duals() {
        return Err(Error::Precondition(
            "SMC needs a prefix estimator on every layer".into(),
        ));
    }
    let mut rng = stream(seed, 0);
    let g0 = t.stack.prefix_bound(&[]);
    let mut active: Vec<SmcParticle> = (0..n_particles)
        .map(|_| SmcParticle {
            ids: Vec::with_capacity(t.max_len + 1),
            bound: g0,
            weight: 1.0,
        })
        .collect();
    let mut finished: Vec<SmcParticle> = Vec::new();
    let mut dist = Vec::with_capacity(t.model.vocab_size());
    let mut total_steps = 0u64;

    while !active.is_empty() {
        let mut still = Vec::with_capacity(active.len());
        for mut p in active {
            let token = if p.ids.len() == t.max_len {
                EOS
            } else {
                t.model.next_dist_into(&p.ids, &mut dist);
                categorical(&mut rng, &dist) as TokenId
            };
            p.ids.push(token);
            total_steps += 1;
            let g = t.stack.prefix_bound(&p.ids);
            p.weight *= p.bound / g;
            p.bound = g;
            if token == EOS {
                finished.push(p);
            } else {
                still.push(p);
            }
        }
        if still.is_empty() {
            break;
        }
        let weights: Vec<f64> = still.iter().map(|p| p.weight).collect();
        let mass: f64 = weights.iter().sum();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::Precondition(format!(
                "SMC weights degenerate (sum {mass})"
            )));
        }
        let each = mass / still.len() as f64;
        let picks = multinomial(&mut rng, &weights, still.len());
        active = picks
            .into_iter()
            .map(|i| SmcParticle {
                ids: still[i].ids.clone(),
                bound: still[i].bound,
                weight: each,
            })
            .collect();
    }

    let weights: Vec<f64> = finished.iter().map(|p| p.weight).collect();
    let mass: f64 = weights.iter().sum();
    if !(mass.is_finite() && mass > 0.0) {
        return Err(Error::Precondition(format!(
            "SMC final weights degenerate (sum {mass})"
        )));
    }
    let picks = multinomial(&mut rng, &weights, n_particles);
    let used: HashSet<usize> = picks.iter().copied().collect();
    let useful: u64 = used.iter().map(|&i| finished[i].ids.len() as u64).sum();
    let accepted: Vec<Sentence> = picks
        .iter()
        .map(|&i| Sentence::new(finished[i].ids.clone()).expect("terminal EOS"))
        .collect();

    let mut stats = SampleStats {
        proposals: n_particles as u64,
        accepted: accepted.len() as u64,
        token_steps_total: total_steps,
        token_steps_wasted: total_steps.saturating_sub(useful),
        distinct_fraction: distinct_fraction(&accepted),
        ..SampleStats::default()
    };
    attach_normalizer(t, &mut stats);
    Ok(SampleBatch { accepted, stats })
}

/// Step weights of one particle path, `g(x_[1:i−1]) / g(x_[1:i])` for
/// `i = 1..=N`.
pub fn smc_step_weights(stack: &EstimatorStack, ids: &[TokenId]) -> Vec<f64> {
    (1..=ids.len())
        .map(|i| stack.prefix_bound(&ids[..i - 1]) / stack.prefix_bound(&ids[..i]))
        .collect()
}

/// Importance-sampling estimate of `Z = E_{x∼P_model}[a(x)]`.
///
/// Returns `(log Z, standard error of log Z)` and stores them in `t`. The
/// standard error of `log Z` is the standard error of the mean divided by the
/// mean.
pub fn estimate_log_normalizer(
    t: &mut TailoredDistribution,
    n_is: usize,
    seed: u64,
    workers: usize,
) -> Result<(f64, f64)> {
    if n_is < 1000 {
        return Err(Error::InvalidArgument(format!(
            "need at least 1000 importance samples, got {n_is}"
        )));
    }
    let model = t.model.as_ref();
    let stack = &t.stack;
    let max_len = t.max_len;
    let values: Vec<f64> = with_pool(workers, || {
        map_indices(0, n_is as u64, workers > 1, &|j| {
            let x = sample_sentence(model, &mut stream(seed, j), max_len);
            stack.acceptance_prob(x.ids())
        })
    });
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let log_z = mean.ln();
    let log_se = se / mean;
    t.log_z = Some(LogNormalizer {
        log_z,
        stderr: log_se,
    });
    Ok((log_z, log_se))
}

/// `log P_tailor(s) = log P_model(s) + log a(s) − log Z`.
pub fn tailored_logprob(t: &TailoredDistribution, s: &Sentence) -> Result<f64> {
    let n = t.log_z.ok_or_else(|| {
        Error::Precondition("tailored log-probability needs an estimated log Z".into())
    })?;
    Ok(
        sentence_logprob_capped(t.model.as_ref(), s, t.max_len) + acceptance_prob(&t.stack, s).ln()
            - n.log_z,
    )
}
