//! Automatic evaluation: PPL, Rev-PPL, EMD over sentence lengths and word
//! frequencies, and sample diversity.
//!
//! EMD over word frequencies ranks the vocabulary by descending frequency in
//! the real corpus (ties by token id) and compares the two corpora's token
//! mass over those ranks with unit ground distance. Absolute values depend
//! on that choice.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::corpus::{Corpus, Sentence, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::lm::{perplexity, LmConfig, NGramModel};
use crate::tailor::{
    distinct_fraction, ers_sample, rejection_sample, smc_sample, tailored_logprob, Algorithm,
    SampleBatch, SamplerConfig, TailoredDistribution,
};

/// Evaluation LM used by Rev-PPL: order 2, add-0.1, equal weights.
pub fn eval_lm_config() -> LmConfig {
    LmConfig::uniform(2, 0.1).expect("valid config")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RevPpl {
    pub value: f64,
    /// Every generated sentence was identical.
    pub degenerate: bool,
}

/// Trains a fresh evaluation LM on `generated` and returns its perplexity on
/// `test`.
pub fn rev_ppl(
    generated: &[Sentence],
    test: &Corpus,
    vocab: &Vocab,
    lm_config: &LmConfig,
) -> Result<RevPpl> {
    if generated.len() < 100 {
        return Err(Error::InvalidArgument(format!(
            "Rev-PPL needs at least 100 generated sentences, got {}",
            generated.len()
        )));
    }
    let degenerate = generated.iter().all(|s| s == &generated[0]);
    let corpus = Corpus::new(generated.to_vec(), "generated");
    let lm = NGramModel::train(&corpus, vocab, lm_config)?;
    Ok(RevPpl {
        value: perplexity(&lm, test)?,
        degenerate,
    })
}

/// `Σ_k |F_a(k) − F_b(k)|` for two count vectors over the same ordered cells.
fn emd_from_counts(a: &[u64], b: &[u64]) -> f64 {
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    let (mut ca, mut cb) = (0u64, 0u64);
    let mut sum = 0.0;
    for (x, y) in a.iter().zip(b) {
        ca += x;
        cb += y;
        // |ca/na − cb/nb| with one rounding per term
        let diff = (ca as i128 * nb as i128 - cb as i128 * na as i128).unsigned_abs();
        sum += diff as f64 / (na as f64 * nb as f64);
    }
    sum
}

/// Earth mover's distance between the word-length distributions.
pub fn emd_lengths(real: &[Sentence], generated: &[Sentence]) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::Empty("EMD needs two non-empty corpora".into()));
    }
    let max = real
        .iter()
        .chain(generated)
        .map(Sentence::word_len)
        .max()
        .unwrap_or(0);
    let hist = |xs: &[Sentence]| {
        let mut h = vec![0u64; max + 1];
        for s in xs {
            h[s.word_len()] += 1;
        }
        h
    };
    Ok(emd_from_counts(&hist(real), &hist(generated)))
}

/// Earth mover's distance between word-frequency distributions over
/// real-frequency ranks.
pub fn emd_word_freq(real: &[Sentence], generated: &[Sentence]) -> Result<f64> {
    let count = |xs: &[Sentence]| {
        let mut c: HashMap<TokenId, u64> = HashMap::new();
        for s in xs {
            for &w in s.words() {
                *c.entry(w).or_default() += 1;
            }
        }
        c
    };
    let (cr, cg) = (count(real), count(generated));
    if cr.is_empty() || cg.is_empty() {
        return Err(Error::Empty(
            "EMD over word frequencies needs words in both corpora".into(),
        ));
    }
    let mut ranked: Vec<TokenId> = cr.keys().chain(cg.keys()).copied().collect();
    ranked.sort_unstable();
    ranked.dedup();
    ranked.sort_by_key(|t| (std::cmp::Reverse(cr.get(t).copied().unwrap_or(0)), *t));
    let a: Vec<u64> = ranked
        .iter()
        .map(|t| cr.get(t).copied().unwrap_or(0))
        .collect();
    let b: Vec<u64> = ranked
        .iter()
        .map(|t| cg.get(t).copied().unwrap_or(0))
        .collect();
    Ok(emd_from_counts(&a, &b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub ppl: f64,
    pub rev_ppl: f64,
    pub rev_ppl_degenerate: bool,
    pub emd_l: f64,
    pub emd_f: f64,
    pub distinct_fraction: f64,
    pub n_samples: usize,
    pub sampler: String,
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let rows: [(&str, String); 9] = [
            ("sampler", self.sampler.clone()),
            ("n_samples", self.n_samples.to_string()),
            ("ppl", format!("{:.4}", self.ppl)),
            ("rev_ppl", format!("{:.4}", self.rev_ppl)),
            ("rev_ppl_degenerate", self.rev_ppl_degenerate.to_string()),
            ("emd_l", format!("{:.6}", self.emd_l)),
            ("emd_f", format!("{:.6}", self.emd_f)),
            (
                "distinct_fraction",
                format!("{:.4}", self.distinct_fraction),
            ),
            ("fingerprint", self.fingerprint.clone()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<20} {v}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub algorithm: Algorithm,
    pub n_samples: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub eval_lm: LmConfig,
}

impl EvalConfig {
    pub fn new(algorithm: Algorithm, n_samples: usize, seed: u64) -> Self {
        EvalConfig {
            algorithm,
            n_samples,
            seed,
            sampler: SamplerConfig::default(),
            eval_lm: eval_lm_config(),
        }
    }
}

/// Draws `n_samples` from `t` with the configured sampler.
pub fn draw(t: &TailoredDistribution, config: &EvalConfig) -> Result<SampleBatch> {
    let batch = match config.algorithm {
        Algorithm::Rs => rejection_sample(t, config.n_samples, config.seed, &config.sampler)?,
        Algorithm::Ers => ers_sample(t, config.n_samples, config.seed, &config.sampler)?,
        Algorithm::Smc => smc_sample(t, config.n_samples, config.seed)?,
    };
    if batch.stats.budget_exhausted {
        return Err(Error::Starvation(format!(
            "only {} of {} samples within the proposal budget",
            batch.accepted.len(),
            config.n_samples
        )));
    }
    Ok(batch)
}

/// Perplexity of `test` under the tailored distribution (which must carry a
/// log normalizer). An empty stack with `log Z = 0` gives the model's own
/// perplexity.
pub fn tailored_perplexity(t: &TailoredDistribution, test: &Corpus) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("perplexity of an empty corpus".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0usize;
    for s in test.iter() {
        nll -= tailored_logprob(t, s)?;
        tokens += s.len();
    }
    Ok((nll / tokens as f64).exp())
}

/// Samples from `t` and computes every metric against `test`.
pub fn evaluate(
    t: &TailoredDistribution,
    test: &Corpus,
    vocab: &Vocab,
    config: &EvalConfig,
) -> Result<(MetricsReport, SampleBatch)> {
    if config.n_samples < 100 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least 100 samples".into(),
        ));
    }
    let batch = draw(t, config)?;
    let rev = rev_ppl(&batch.accepted, test, vocab, &config.eval_lm)?;
    let fingerprint = format!(
        "{:016x}",
        fnv1a(&format!(
            "{}|{}|{}|{}|{}|{:?}",
            config.algorithm,
            config.n_samples,
            config.seed,
            t.max_len,
            t.stack.len(),
            config.eval_lm
        ))
    );
    let report = MetricsReport {
        ppl: tailored_perplexity(t, test)?,
        rev_ppl: rev.value,
        rev_ppl_degenerate: rev.degenerate,
        emd_l: emd_lengths(&test.sentences, &batch.accepted)?,
        emd_f: emd_word_freq(&test.sentences, &batch.accepted)?,
        distinct_fraction: distinct_fraction(&batch.accepted),
        n_samples: batch.accepted.len(),
        sampler: config.algorithm.to_string(),
        fingerprint,
    };
    Ok((report, batch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{sample_sentence, UnigramModel};
    use crate::ratio::EstimatorStack;
    use crate::rng::stream;
    use std::sync::Arc;

    fn s(words: &[TokenId]) -> Sentence {
        Sentence::from_words(words.to_vec()).unwrap()
    }

    fn of_lengths(lens: &[usize]) -> Vec<Sentence> {
        lens.iter().map(|&n| s(&vec![2; n])).collect()
    }

    #[test]
    fn emd_length_examples() {
        let a = of_lengths(&[1, 3, 2]);
        assert_eq!(emd_lengths(&a, &a).unwrap(), 0.0);
        assert_eq!(
            emd_lengths(&of_lengths(&[1]), &of_lengths(&[2])).unwrap(),
            1.0
        );
        assert_eq!(
            emd_lengths(&of_lengths(&[1, 3]), &of_lengths(&[2, 2])).unwrap(),
            1.0
        );
        assert!(emd_lengths(&[], &a).is_err());
    }

    #[test]
    fn emd_freq_examples() {
        let real = vec![s(&[2, 3])];
        let gen = vec![s(&[2, 2])];
        assert_eq!(emd_word_freq(&real, &real).unwrap(), 0.0);
        assert_eq!(emd_word_freq(&real, &gen).unwrap(), 0.5);
        // with a fixed rank order the distance is symmetric
        let (a, b) = ([3, 1, 0, 2], [1, 1, 2, 2]);
        assert_eq!(emd_from_counts(&a, &b), emd_from_counts(&b, &a));
    }

    #[test]
    fn rev_ppl_prefers_matching_data() {
        let vocab = Vocab::from_tokens(["<unk>", "<eos>", "a", "b", "c", "d"]).unwrap();
        let truth = UnigramModel::new(vec![0.0, 0.2, 0.5, 0.2, 0.1, 0.0]).unwrap();
        let noise = UnigramModel::new(vec![0.0, 0.2, 0.2, 0.2, 0.2, 0.2]).unwrap();
        let test = Corpus::new(
            (0..500)
                .map(|j| sample_sentence(&truth, &mut stream(1, j), 10))
                .collect(),
            "t",
        );
        let good: Vec<Sentence> = (0..1000)
            .map(|j| sample_sentence(&truth, &mut stream(2, j), 10))
            .collect();
        let bad: Vec<Sentence> = (0..1000)
            .map(|j| sample_sentence(&noise, &mut stream(2, j), 10))
            .collect();
        let cfg = eval_lm_config();
        let g = rev_ppl(&good, &test, &vocab, &cfg).unwrap();
        let b = rev_ppl(&bad, &test, &vocab, &cfg).unwrap();
        assert!(g.value < b.value);
        assert!(!g.degenerate);
        let same = vec![s(&[2]); 100];
        assert!(rev_ppl(&same, &test, &vocab, &cfg).unwrap().degenerate);
        assert!(rev_ppl(&good[..99], &test, &vocab, &cfg).is_err());
    }

    #[test]
    fn evaluate_is_reproducible_and_finite() {
        let vocab = Vocab::from_tokens(["<unk>", "<eos>", "a", "b"]).unwrap();
        let m = Arc::new(UnigramModel::new(vec![0.05, 0.25, 0.4, 0.3]).unwrap());
        let test = Corpus::new(
            (0..200)
                .map(|j| sample_sentence(m.as_ref(), &mut stream(5, j), 8))
                .collect(),
            "t",
        );
        let t =
            TailoredDistribution::new(m, EstimatorStack::empty(), 8).with_log_normalizer(0.0, 0.0);
        let cfg = EvalConfig::new(Algorithm::Rs, 300, 7);
        let (a, _) = evaluate(&t, &test, &vocab, &cfg).unwrap();
        let (b, _) = evaluate(&t, &test, &vocab, &cfg).unwrap();
        assert_eq!(a, b);
        for v in [a.ppl, a.rev_ppl, a.emd_l, a.emd_f, a.distinct_fraction] {
            assert!(v.is_finite() && v >= 0.0);
        }
        assert!(a.to_table().contains("rev_ppl"));
        let json: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(json["n_samples"], 300);
    }

    proptest::proptest! {
        #[test]
        fn emd_is_nonnegative_and_zero_on_self(
            xs in proptest::collection::vec(proptest::collection::vec(2u32..6, 0..6), 1..20),
            ys in proptest::collection::vec(proptest::collection::vec(2u32..6, 0..6), 1..20),
        ) {
            let a: Vec<Sentence> = xs.iter().map(|w| s(w)).collect();
            let b: Vec<Sentence> = ys.iter().map(|w| s(w)).collect();
            let d = emd_lengths(&a, &b).unwrap();
            proptest::prop_assert!(d >= 0.0);
            proptest::prop_assert_eq!(emd_lengths(&a, &a).unwrap(), 0.0);
            proptest::prop_assert_eq!(d, emd_lengths(&b, &a).unwrap());
            if let (Ok(f), Ok(g)) = (emd_word_freq(&a, &b), emd_word_freq(&a, &a)) {
                proptest::prop_assert!(f >= 0.0);
                proptest::prop_assert_eq!(g, 0.0);
            }
        }
    }
}
