//! Brute-force ground truth for small vocabularies.
//!
//! Enumeration follows ancestral sampling with `EOS` forced after `max_len`
//! words, so every sentence of at most `max_len` words is listed and the
//! listed probabilities sum to one. `leftover_mass` is whatever floating
//! point leaves over; `truncated_mass` is the probability that was moved onto
//! capped sentences by forcing `EOS`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::corpus::{Sentence, TokenId, Vocab, EOS};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::ratio::{EstimatorStack, PrefixRatio, SentenceRatio};

/// Largest `|V|^max_len` the enumerators accept.
pub const ENUMERATION_GUARD: f64 = 1e7;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    pub entries: BTreeMap<Sentence, f64>,
    pub leftover_mass: f64,
    pub truncated_mass: f64,
    /// Normalizer of a tailored distribution; `None` for plain models.
    pub z: Option<f64>,
}

impl ExactDistribution {
    pub fn prob(&self, s: &Sentence) -> f64 {
        self.entries.get(s).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lines `sentence TAB probability`, sorted by the decoded text.
    pub fn dump(&self, vocab: &Vocab) -> String {
        let mut lines: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|(s, p)| (vocab.decode(s), *p))
            .collect();
        lines.sort_by(|a, b| a.0.cmp(&b.0));
        let mut out = String::new();
        for (text, p) in lines {
            let _ = writeln!(out, "{text}\t{p}");
        }
        out
    }

    /// Inverse-CDF draws over the entries in sentence order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Sentence> {
        let support: Vec<(&Sentence, f64)> = self.entries.iter().map(|(s, p)| (s, *p)).collect();
        let mut cum = Vec::with_capacity(support.len());
        let mut acc = 0.0;
        for (_, p) in &support {
            acc += p;
            cum.push(acc);
        }
        (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                let i = cum.partition_point(|&c| c <= u).min(support.len() - 1);
                support[i].0.clone()
            })
            .collect()
    }
}

fn check_guard(vocab_size: usize, max_len: usize) -> Result<()> {
    let n = (vocab_size as f64).powi(max_len as i32);
    if n > ENUMERATION_GUARD {
        return Err(Error::GuardExceeded(format!(
            "{vocab_size}^{max_len} = {n:.3e} sequences exceed the enumeration guard"
        )));
    }
    Ok(())
}

/// Calls `f(ids)` for every sentence of at most `max_len` words over the
/// non-`EOS` tokens, `ids` ending in `EOS`, in lexicographic order.
fn for_each_sentence(
    vocab_size: usize,
    max_len: usize,
    prefix: &mut Vec<TokenId>,
    f: &mut impl FnMut(&[TokenId]),
) {
    prefix.push(EOS);
    f(prefix);
    prefix.pop();
    if prefix.len() == max_len {
        return;
    }
    for t in 0..vocab_size as TokenId {
        if t == EOS {
            continue;
        }
        prefix.push(t);
        for_each_sentence(vocab_size, max_len, prefix, f);
        prefix.pop();
    }
}

/// Exact model distribution over all sentences of at most `max_len` words.
pub fn enumerate_model(model: &dyn LanguageModel, max_len: usize) -> Result<ExactDistribution> {
    let v = model.vocab_size();
    check_guard(v, max_len)?;
    let mut entries = BTreeMap::new();
    let mut truncated = 0.0;
    let mut dist = Vec::with_capacity(v);

    fn walk(
        model: &dyn LanguageModel,
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        p: f64,
        dist: &mut Vec<f64>,
        entries: &mut BTreeMap<Sentence, f64>,
        truncated: &mut f64,
    ) {
        model.next_dist_into(prefix, dist);
        let here = dist.clone();
        let mut ids = prefix.clone();
        ids.push(EOS);
        let s = Sentence::new(ids).expect("terminal EOS");
        if prefix.len() == max_len {
            *truncated += p * (1.0 - here[EOS as usize]);
            entries.insert(s, p);
            return;
        }
        entries.insert(s, p * here[EOS as usize]);
        for (t, &q) in here.iter().enumerate() {
            if t == EOS as usize || q == 0.0 {
                continue;
            }
            prefix.push(t as TokenId);
            walk(model, max_len, prefix, p * q, dist, entries, truncated);
            prefix.pop();
        }
    }

    walk(
        model,
        max_len,
        &mut Vec::new(),
        1.0,
        &mut dist,
        &mut entries,
        &mut truncated,
    );
    entries.retain(|_, p| *p > 0.0);
    let total: f64 = entries.values().sum();
    Ok(ExactDistribution {
        entries,
        leftover_mass: (1.0 - total).max(0.0),
        truncated_mass: truncated,
        z: None,
    })
}

/// Exact tailored distribution `P_model(x) a(x) / Z` and its normalizer.
pub fn exact_tailored(
    model: &dyn LanguageModel,
    stack: &EstimatorStack,
    max_len: usize,
) -> Result<ExactDistribution> {
    let base = enumerate_model(model, max_len)?;
    let mut entries: BTreeMap<Sentence, f64> = base
        .entries
        .iter()
        .map(|(s, p)| (s.clone(), p * stack.acceptance_prob(s.ids())))
        .collect();
    let z: f64 = entries.values().sum();
    if z.is_nan() || z <= 0.0 {
        return Err(Error::Precondition(
            "tailored distribution has zero mass".into(),
        ));
    }
    for p in entries.values_mut() {
        *p /= z;
    }
    let total: f64 = entries.values().sum();
    Ok(ExactDistribution {
        entries,
        leftover_mass: (1.0 - total).max(0.0),
        truncated_mass: base.truncated_mass,
        z: Some(z),
    })
}

/// Minimum of `ratio(x)` over all completions `x` of `prefix`, for every
/// prefix of at most `max_len` words (with and without a terminal `EOS`).
fn prefix_min_table(
    vocab_size: usize,
    max_len: usize,
    ratio: &dyn Fn(&[TokenId]) -> f64,
) -> HashMap<Vec<TokenId>, f64> {
    fn walk(
        vocab_size: usize,
        max_len: usize,
        prefix: &mut Vec<TokenId>,
        ratio: &dyn Fn(&[TokenId]) -> f64,
        table: &mut HashMap<Vec<TokenId>, f64>,
    ) -> f64 {
        prefix.push(EOS);
        let here = ratio(prefix);
        table.insert(prefix.clone(), here);
        prefix.pop();
        let mut best = here;
        if prefix.len() < max_len {
            for t in 0..vocab_size as TokenId {
                if t == EOS {
                    continue;
                }
                prefix.push(t);
                best = best.min(walk(vocab_size, max_len, prefix, ratio, table));
                prefix.pop();
            }
        }
        table.insert(prefix.clone(), best);
        best
    }
    let mut table = HashMap::new();
    walk(vocab_size, max_len, &mut Vec::new(), ratio, &mut table);
    table
}

/// `min_{x ⊒ prefix} Π_k γ_k(x)` over completions of at most `max_len` words.
pub fn exact_prefix_min_gamma(
    stack: &EstimatorStack,
    prefix: &[TokenId],
    vocab_size: usize,
    max_len: usize,
) -> Result<f64> {
    check_guard(vocab_size, max_len)?;
    if prefix.last() == Some(&EOS) {
        return Ok(stack.composite_gamma(prefix));
    }
    if prefix.len() > max_len {
        return Err(Error::InvalidArgument(format!(
            "prefix of {} words exceeds max_len {max_len}",
            prefix.len()
        )));
    }
    let mut best = f64::INFINITY;
    let mut p = prefix.to_vec();
    let budget = max_len - prefix.len();
    // enumerate suffixes of at most `budget` words
    let mut suffix = Vec::new();
    for_each_sentence(vocab_size, budget, &mut suffix, &mut |tail| {
        p.truncate(prefix.len());
        p.extend_from_slice(tail);
        best = best.min(stack.composite_gamma(&p));
    });
    Ok(best)
}

/// Exact per-prefix minimum of one full-sentence estimator, usable as that
/// layer's prefix estimator.
pub struct OraclePrefixMin {
    table: HashMap<Vec<TokenId>, f64>,
}

impl OraclePrefixMin {
    pub fn new(full: &dyn SentenceRatio, vocab_size: usize, max_len: usize) -> Result<Self> {
        check_guard(vocab_size, max_len)?;
        Ok(OraclePrefixMin {
            table: prefix_min_table(vocab_size, max_len, &|ids| full.gamma(ids)),
        })
    }
}

impl PrefixRatio for OraclePrefixMin {
    fn gamma_prefix(&self, prefix: &[TokenId]) -> f64 {
        *self
            .table
            .get(prefix)
            .unwrap_or_else(|| panic!("prefix {prefix:?} outside the enumerated space"))
    }
}

/// The stack with each layer's prefix estimator replaced by its exact
/// prefix minimum.
pub fn with_oracle_duals(
    stack: &EstimatorStack,
    vocab_size: usize,
    max_len: usize,
) -> Result<EstimatorStack> {
    let duals = stack
        .layers()
        .iter()
        .map(|l| {
            OraclePrefixMin::new(l.full.as_ref(), vocab_size, max_len)
                .map(|o| Arc::new(o) as Arc<dyn PrefixRatio>)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(stack.with_duals(duals))
}

/// Fraction of (layer, unfinished prefix) pairs where the learned prefix
/// estimate exceeds the exact minimum over completions by more than `tol`.
pub fn dual_violation_rate(
    stack: &EstimatorStack,
    vocab_size: usize,
    max_len: usize,
    tol: f64,
) -> Result<f64> {
    check_guard(vocab_size, max_len)?;
    let mut checked = 0usize;
    let mut violations = 0usize;
    for l in stack.layers() {
        let Some(dual) = &l.dual else { continue };
        let table = prefix_min_table(vocab_size, max_len, &|ids| l.full.gamma(ids));
        for (prefix, &exact) in &table {
            if prefix.last() == Some(&EOS) {
                continue;
            }
            checked += 1;
            if dual.gamma_prefix(prefix) > exact * (1.0 + tol) {
                violations += 1;
            }
        }
    }
    Ok(if checked == 0 {
        0.0
    } else {
        violations as f64 / checked as f64
    })
}

/// Empirical distribution of a sample list.
pub fn empirical(samples: &[Sentence]) -> BTreeMap<Sentence, f64> {
    let mut counts: BTreeMap<Sentence, f64> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.clone()).or_default() += 1.0;
    }
    let n = samples.len() as f64;
    for v in counts.values_mut() {
        *v /= n;
    }
    counts
}

/// `½ Σ |p − q|` over the union of supports.
pub fn tv_distance(p: &BTreeMap<Sentence, f64>, q: &BTreeMap<Sentence, f64>) -> f64 {
    let mut sum = 0.0;
    for (s, a) in p {
        sum += (a - q.get(s).copied().unwrap_or(0.0)).abs();
    }
    for (s, b) in q {
        if !p.contains_key(s) {
            sum += b.abs();
        }
    }
    0.5 * sum
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

fn chi_tail(statistic: f64, dof: usize) -> f64 {
    if !statistic.is_finite() {
        return 0.0;
    }
    ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .sf(statistic)
}

/// Pearson goodness of fit of `samples` against `exact`.
///
/// Cells with expected count below 5 are pooled into one bucket, together
/// with any sample outside the exact support; a pooled bucket that is still
/// below 5 joins the smallest retained cell.
pub fn chi_square_gof(samples: &[Sentence], exact: &ExactDistribution) -> Result<ChiSquare> {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let mut observed: HashMap<&Sentence, f64> = HashMap::new();
    for s in samples {
        *observed.entry(s).or_default() += 1.0;
    }
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    let mut seen = 0.0;
    for (s, p) in &exact.entries {
        let o = observed.get(s).copied().unwrap_or(0.0);
        seen += o;
        let e = n * p;
        if e >= 5.0 {
            cells.push((o, e));
        } else {
            pooled.0 += o;
            pooled.1 += e;
        }
    }
    pooled.0 += n - seen;
    if pooled.0 > 0.0 || pooled.1 > 0.0 {
        if pooled.1 >= 5.0 || cells.is_empty() {
            cells.push(pooled);
        } else if let Some(smallest) = cells.iter_mut().min_by(|a, b| a.1.total_cmp(&b.1)) {
            smallest.0 += pooled.0;
            smallest.1 += pooled.1;
        }
    }
    if cells.len() < 2 {
        return Err(Error::InvalidArgument(
            "too few samples: fewer than two cells with expected count >= 5".into(),
        ));
    }
    let statistic: f64 = cells
        .iter()
        .map(|&(o, e)| {
            if e > 0.0 {
                (o - e) * (o - e) / e
            } else if o > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .sum();
    let dof = cells.len() - 1;
    Ok(ChiSquare {
        statistic,
        dof,
        p_value: chi_tail(statistic, dof),
    })
}

/// Two-sample chi-square homogeneity test over the union of supports.
///
/// Cells whose expected count in either sample is below 5 are pooled.
pub fn two_sample_chi_square(a: &[Sentence], b: &[Sentence]) -> Result<ChiSquare> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument(
            "both samples must be non-empty".into(),
        ));
    }
    let mut counts: BTreeMap<&Sentence, (f64, f64)> = BTreeMap::new();
    for s in a {
        counts.entry(s).or_default().0 += 1.0;
    }
    for s in b {
        counts.entry(s).or_default().1 += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let fa = na / (na + nb);
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for &(x, y) in counts.values() {
        let t = x + y;
        if (t * fa).min(t * (1.0 - fa)) >= 5.0 {
            cells.push((x, y));
        } else {
            pooled.0 += x;
            pooled.1 += y;
        }
    }
    if pooled.0 + pooled.1 > 0.0 {
        cells.push(pooled);
    }
    if cells.len() < 2 {
        return Err(Error::InvalidArgument(
            "too few samples for a two-sample test".into(),
        ));
    }
    let statistic = cells
        .iter()
        .map(|&(x, y)| {
            let t = x + y;
            let (ea, eb) = (t * fa, t * (1.0 - fa));
            (x - ea) * (x - ea) / ea + (y - eb) * (y - eb) / eb
        })
        .sum();
    let dof = cells.len() - 1;
    Ok(ChiSquare {
        statistic,
        dof,
        p_value: chi_tail(statistic, dof),
    })
}
