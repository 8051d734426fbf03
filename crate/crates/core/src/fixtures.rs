//! Synthetic corpora from known generators.
//!
//! * [`enumerable_fixture`]: five-token vocabulary with `max_len = 4`, small
//!   enough for exact enumeration.
//! * [`benchmark`]: a "general" corpus dominated by short replies such as
//!   `yes .` and a structured "domain" corpus where those replies are rare.
//!   Mixing a model trained on the former with one trained on the latter
//!   over-estimates the short replies.
//! * [`separable_scenario`]: a model whose bad sentences are recognizable
//!   from their first token, so prefix estimators can reject them early.

use std::fs;
use std::path::Path;

use crate::corpus::{Corpus, Sentence, TokenId, Vocab, EOS};
use crate::error::{Error, Result};
use crate::lm::{sample_sentence, LanguageModel, LmConfig, NGramModel};
use crate::rng::{derive_seed, stream};

/// Markov source with explicit conditionals over the last `context` tokens
/// (left padded with `EOS`).
#[derive(Debug, Clone, PartialEq)]
pub struct TableSource {
    vocab_size: usize,
    context: usize,
    rows: Vec<Vec<f64>>,
}

impl TableSource {
    /// Builds every row from `rule(history)`. Rows are normalized; `EOS` is
    /// never required to be reachable.
    pub fn from_rule(
        vocab_size: usize,
        context: usize,
        rule: impl Fn(&[TokenId]) -> Vec<f64>,
    ) -> Self {
        let n_rows = vocab_size.pow(context as u32);
        let mut rows = Vec::with_capacity(n_rows);
        let mut history = vec![0 as TokenId; context];
        for r in 0..n_rows {
            let mut x = r;
            for slot in history.iter_mut().rev() {
                *slot = (x % vocab_size) as TokenId;
                x /= vocab_size;
            }
            let mut row = rule(&history);
            assert_eq!(row.len(), vocab_size, "rule row has wrong length");
            let sum: f64 = row.iter().sum();
            assert!(sum > 0.0, "rule row for {history:?} has no mass");
            for p in &mut row {
                *p /= sum;
            }
            rows.push(row);
        }
        TableSource {
            vocab_size,
            context,
            rows,
        }
    }

    fn row_index(&self, prefix: &[TokenId]) -> usize {
        let mut idx = 0;
        for i in 0..self.context {
            let pos = prefix.len() as isize - self.context as isize + i as isize;
            let t = if pos < 0 { EOS } else { prefix[pos as usize] };
            idx = idx * self.vocab_size + t as usize;
        }
        idx
    }
}

impl LanguageModel for TableSource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist_into(&self, prefix: &[TokenId], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.rows[self.row_index(prefix)]);
    }
}

/// `n` independent draws, sentence `j` from stream `(seed, j)`.
pub fn draw_corpus(
    source: &dyn LanguageModel,
    n: usize,
    max_len: usize,
    seed: u64,
    name: &str,
) -> Corpus {
    let sentences = (0..n as u64)
        .map(|j| sample_sentence(source, &mut stream(seed, j), max_len))
        .collect();
    Corpus::new(sentences, name)
}

pub const ENUM_MAX_LEN: usize = 4;

#[derive(Debug, Clone)]
pub struct EnumerableFixture {
    pub vocab: Vocab,
    /// Generator of the real data.
    pub truth: TableSource,
    /// Bigram model trained on data from a different generator.
    pub model: NGramModel,
    pub real: Corpus,
    pub max_len: usize,
}

/// `V = {<unk>, <eos>, a, b, c}`, `max_len = 4`.
///
/// Real data prefers `a` after `EOS` and alternates `a`/`b`; the model is
/// trained on data where `c` is common, so it over-estimates sentences with
/// `c` (and, through smoothing, `<unk>`).
pub fn enumerable_fixture(seed: u64) -> EnumerableFixture {
    let vocab = Vocab::from_tokens(["<unk>", "<eos>", "a", "b", "c"]).expect("valid vocab");
    let truth = TableSource::from_rule(5, 1, |h| match h[0] {
        1 => vec![0.0, 0.15, 0.6, 0.2, 0.05],
        2 => vec![0.0, 0.35, 0.1, 0.5, 0.05],
        3 => vec![0.0, 0.4, 0.45, 0.1, 0.05],
        _ => vec![0.0, 0.5, 0.2, 0.2, 0.1],
    });
    let skewed = TableSource::from_rule(5, 1, |h| match h[0] {
        1 => vec![0.0, 0.1, 0.3, 0.2, 0.4],
        4 => vec![0.0, 0.3, 0.2, 0.1, 0.4],
        _ => vec![0.0, 0.35, 0.2, 0.2, 0.25],
    });
    let train = draw_corpus(
        &skewed,
        3000,
        ENUM_MAX_LEN,
        derive_seed(seed, 1),
        "enum-general",
    );
    let config = LmConfig::new(2, 0.5, vec![0.2, 0.8]).expect("valid config");
    let model = NGramModel::train(&train, &vocab, &config).expect("non-empty corpus");
    let real = draw_corpus(
        &truth,
        2000,
        ENUM_MAX_LEN,
        derive_seed(seed, 2),
        "enum-real",
    );
    EnumerableFixture {
        vocab,
        truth,
        model,
        real,
        max_len: ENUM_MAX_LEN,
    }
}

const BENCH_WORDS: [&str; 42] = [
    "<unk>", "<eos>", ".", "yes", "no", "ok", "the", "a", "and", // function words
    "big", "small", "red", "old", "quiet", "happy", // adjectives
    "cat", "dog", "bird", "fox", "horse", "mouse", "goat", "duck", // animals
    "sat", "ran", "slept", "hid", "jumped", "waited", // verbs
    "on", "under", "near", "behind", "beside", // prepositions
    "mat", "rug", "box", "bed", "chair", "table", "fence", "tree", // places
];

pub const BENCH_MAX_LEN: usize = 24;

pub fn benchmark_vocab() -> Vocab {
    Vocab::from_tokens(BENCH_WORDS).expect("valid vocab")
}

fn ids_of(vocab: &Vocab, words: &[&str]) -> Vec<TokenId> {
    words
        .iter()
        .map(|w| vocab.id(w).expect("benchmark word"))
        .collect()
}

/// Structured domain sentences such as `the big cat sat on a red mat .`,
/// with `yes .` in one sentence of a hundred.
pub fn domain_source() -> TableSource {
    let v = benchmark_vocab();
    let id = |w: &str| v.id(w).expect("benchmark word") as usize;
    let adjs = ids_of(&v, &["big", "small", "red", "old", "quiet", "happy"]);
    let animals = ids_of(
        &v,
        &[
            "cat", "dog", "bird", "fox", "horse", "mouse", "goat", "duck",
        ],
    );
    let verbs = ids_of(&v, &["sat", "ran", "slept", "hid", "jumped", "waited"]);
    let preps = ids_of(&v, &["on", "under", "near", "behind", "beside"]);
    let places = ids_of(
        &v,
        &[
            "mat", "rug", "box", "bed", "chair", "table", "fence", "tree",
        ],
    );
    let n = v.len();
    TableSource::from_rule(n, 2, move |h| {
        let (prev, last) = (h[0] as usize, h[1] as usize);
        let mut row = vec![0.0; n];
        let spread = |set: &[TokenId], mass: f64, row: &mut Vec<f64>| {
            for &t in set {
                row[t as usize] += mass / set.len() as f64;
            }
        };
        let is = |set: &[TokenId], t: usize| set.contains(&(t as TokenId));
        if last == EOS as usize {
            row[id("the")] = 0.99;
            row[id("yes")] = 0.01;
        } else if last == id("yes") {
            row[id(".")] = 1.0;
        } else if last == id(".") {
            row[EOS as usize] = 1.0;
        } else if last == id("the") {
            spread(&adjs, 0.4, &mut row);
            spread(&animals, 0.6, &mut row);
        } else if last == id("a") {
            spread(&adjs, 0.3, &mut row);
            spread(&places, 0.7, &mut row);
        } else if is(&adjs, last) {
            if prev == id("a") {
                spread(&places, 1.0, &mut row);
            } else {
                spread(&animals, 1.0, &mut row);
            }
        } else if is(&animals, last) {
            spread(&verbs, 1.0, &mut row);
        } else if is(&verbs, last) {
            spread(&preps, 0.6, &mut row);
            row[id(".")] = 0.4;
        } else if is(&preps, last) {
            row[id("a")] = 1.0;
        } else if is(&places, last) {
            row[id(".")] = 0.6;
            row[id("and")] = 0.4;
        } else if last == id("and") {
            row[id("the")] = 1.0;
        } else {
            row[id(".")] = 1.0;
        }
        row
    })
}

/// Mostly short replies (`yes .`, `no .`, `ok .`); the rest are loose word
/// sequences over the whole vocabulary.
pub fn general_source() -> TableSource {
    let v = benchmark_vocab();
    let id = |w: &str| v.id(w).expect("benchmark word") as usize;
    let content: Vec<usize> = (id("the")..v.len()).collect();
    let n = v.len();
    TableSource::from_rule(n, 2, move |h| {
        let last = h[1] as usize;
        let mut row = vec![0.0; n];
        if last == EOS as usize {
            row[id("yes")] = 0.4;
            row[id("no")] = 0.1;
            row[id("ok")] = 0.1;
            for &t in &content {
                row[t] = 0.4 / content.len() as f64;
            }
        } else if last == id("yes") || last == id("no") || last == id("ok") {
            row[id(".")] = 0.9;
            row[last] = 0.1;
        } else if last == id(".") {
            row[EOS as usize] = 1.0;
        } else {
            row[id(".")] = 0.2;
            for &t in &content {
                row[t] = 0.8 / content.len() as f64;
            }
        }
        row
    })
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub vocab: Vocab,
    pub general: Corpus,
    pub domain_train: Corpus,
    pub domain_test: Corpus,
    pub base: NGramModel,
    pub finetuned: NGramModel,
    pub mu: f64,
    pub max_len: usize,
    /// The short reply that fine-tuning over-estimates.
    pub injected: Sentence,
    /// A long domain sentence absent from the training data.
    pub complex: Sentence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSizes {
    pub general: usize,
    pub domain_train: usize,
    pub domain_test: usize,
    pub mu: f64,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        BenchmarkSizes {
            general: 20_000,
            domain_train: 1000,
            domain_test: 1000,
            mu: 0.5,
        }
    }
}

/// Trigram models with add-0.01 smoothing; `μ` fixed by `sizes`.
pub fn benchmark_lm_config() -> LmConfig {
    LmConfig::new(3, 0.01, vec![0.1, 0.3, 0.6]).expect("valid config")
}

pub fn benchmark(seed: u64, sizes: &BenchmarkSizes) -> Result<Benchmark> {
    let vocab = benchmark_vocab();
    let max_len = BENCH_MAX_LEN;
    let general = draw_corpus(
        &general_source(),
        sizes.general,
        max_len,
        derive_seed(seed, 11),
        "general",
    );
    let domain = domain_source();
    let domain_train = draw_corpus(
        &domain,
        sizes.domain_train,
        max_len,
        derive_seed(seed, 12),
        "domain-train",
    );
    let domain_test = draw_corpus(
        &domain,
        sizes.domain_test,
        max_len,
        derive_seed(seed, 13),
        "domain-test",
    );
    let config = benchmark_lm_config();
    let base = NGramModel::train(&general, &vocab, &config)?;
    let finetuned = base.finetune(&domain_train, sizes.mu)?;
    let injected = Sentence::from_words(ids_of(&vocab, &["yes", "."]))?;
    let complex_words = [
        "the", "small", "bird", "slept", "under", "a", "red", "box", "and", "the", "dog", "ran",
        "near", "a", "rug", ".",
    ];
    let complex = Sentence::from_words(ids_of(&vocab, &complex_words))?;
    if domain_train.sentences.contains(&complex) {
        return Err(Error::Precondition(
            "held-out sentence leaked into training data".into(),
        ));
    }
    Ok(Benchmark {
        vocab,
        general,
        domain_train,
        domain_test,
        base,
        finetuned,
        mu: sizes.mu,
        max_len,
        injected,
        complex,
    })
}

/// Writes the benchmark corpora as text files under `dir`.
pub fn write_benchmark_files(b: &Benchmark, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, corpus) in [
        ("general.txt", &b.general),
        ("domain_train.txt", &b.domain_train),
        ("domain_test.txt", &b.domain_test),
    ] {
        let path = dir.join(name);
        fs::write(&path, corpus.to_text(&b.vocab)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

pub const SEPARABLE_MAX_LEN: usize = 30;

#[derive(Debug, Clone)]
pub struct SeparableScenario {
    pub vocab: Vocab,
    pub model: TableSource,
    pub truth: TableSource,
    pub real: Corpus,
    pub max_len: usize,
}

/// Sentences opening with `x` never occur in real data and are visible from
/// the first token. Sentences opening with `y` are shared, but the model ends
/// twice as many of them with `z` (drawn right before `EOS`), an excess that
/// only shows at the end. Real data also opens with `v`, which the model
/// never does. The filler in between is shared.
pub fn separable_scenario(seed: u64, n_real: usize) -> SeparableScenario {
    let vocab = Vocab::from_tokens(["<unk>", "<eos>", "x", "y", "f", "g", "h", "z", "v"])
        .expect("valid vocab");
    let source = |open: [f64; 3], p_z: f64, p_eos: f64| {
        TableSource::from_rule(9, 1, move |h| {
            let mut row = vec![0.0; 9];
            match h[0] {
                EOS => {
                    row[2] = open[0];
                    row[3] = open[1];
                    row[8] = open[2];
                }
                7 => row[EOS as usize] = 1.0,
                _ => {
                    row[EOS as usize] = p_eos;
                    row[7] = p_z;
                    row[4..7].fill((1.0 - p_eos - p_z) / 3.0);
                }
            }
            row
        })
    };
    let model = source([0.3, 0.7, 0.0], 0.032, 0.048);
    let truth = source([0.0, 0.7, 0.3], 0.016, 0.064);
    let real = draw_corpus(
        &truth,
        n_real,
        SEPARABLE_MAX_LEN,
        derive_seed(seed, 21),
        "separable-real",
    );
    SeparableScenario {
        vocab,
        model,
        truth,
        real,
        max_len: SEPARABLE_MAX_LEN,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::sentence_logprob;

    #[test]
    fn table_rows_are_distributions() {
        for src in [
            domain_source(),
            general_source(),
            enumerable_fixture(0).truth,
        ] {
            for row in &src.rows {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn table_source_uses_padded_history() {
        let v = benchmark_vocab();
        let d = domain_source();
        let first = d.next_dist(&[]);
        assert!((first[v.id("the").unwrap() as usize] - 0.99).abs() < 1e-12);
        let the = v.id("the").unwrap();
        let big = v.id("big").unwrap();
        let a = v.id("a").unwrap();
        let cat = v.id("cat").unwrap() as usize;
        let mat = v.id("mat").unwrap() as usize;
        assert!(d.next_dist(&[the, big])[cat] > 0.0);
        assert_eq!(d.next_dist(&[the, big])[mat], 0.0);
        assert!(d.next_dist(&[a, big])[mat] > 0.0);
    }

    #[test]
    fn enumerable_fixture_is_small_and_deterministic() {
        let a = enumerable_fixture(3);
        let b = enumerable_fixture(3);
        assert_eq!(a.model, b.model);
        assert_eq!(a.real, b.real);
        assert_eq!(a.vocab.len(), 5);
        assert!(a.real.iter().all(|s| s.word_len() <= ENUM_MAX_LEN));
    }

    #[test]
    fn benchmark_finetuning_overestimates_short_reply() {
        let b = benchmark(1, &BenchmarkSizes::default()).unwrap();
        let ft = sentence_logprob(&b.finetuned, &b.injected).exp();
        let truth = sentence_logprob(&domain_source(), &b.injected).exp();
        assert!(ft > 5.0 * truth, "{ft} vs {truth}");
        let complex_truth = sentence_logprob(&domain_source(), &b.complex).exp();
        assert!(complex_truth > 0.0);
        let dir = tempfile::tempdir().unwrap();
        write_benchmark_files(&b, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("domain_test.txt")).unwrap();
        assert_eq!(text.lines().count(), b.domain_test.len());
    }

    #[test]
    fn separable_real_data_never_opens_with_x() {
        let s = separable_scenario(0, 200);
        let x = s.vocab.id("x").unwrap();
        assert!(s.real.iter().all(|r| r.ids()[0] != x));
        let from_model = draw_corpus(&s.model, 200, s.max_len, 1, "m");
        assert!(from_model.iter().any(|r| r.ids()[0] == x));
    }
}
