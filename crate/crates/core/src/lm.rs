//! Interpolated add-α n-gram language model.
//!
//! `P(w | ctx) = Σ_k λ_k (c_k(ctx_k, w) + α) / (T_k(ctx_k) + α V)` where
//! `ctx_k` is the last `k` tokens of the history and the history is left
//! padded with `EOS`. Fine-tuning mixes the conditionals of two such models,
//! so a model is a weighted list of count tables.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::corpus::{Corpus, Sentence, TokenId, Vocab, EOS};
use crate::error::{Error, Result};
use crate::rng::categorical;

/// Anything that yields exact next-token distributions.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Writes `P(· | prefix)` into `out` (resized to the vocabulary size).
    /// `prefix` never contains `EOS`.
    fn next_dist_into(&self, prefix: &[TokenId], out: &mut Vec<f64>);

    fn next_dist(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut out = Vec::new();
        self.next_dist_into(prefix, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub order: usize,
    pub alpha: f64,
    /// Interpolation weight per context length, index 0 is the unigram.
    pub lambdas: Vec<f64>,
}

impl LmConfig {
    pub fn new(order: usize, alpha: f64, lambdas: Vec<f64>) -> Result<Self> {
        let c = LmConfig {
            order,
            alpha,
            lambdas,
        };
        c.validate()?;
        Ok(c)
    }

    /// Uniform interpolation weights.
    pub fn uniform(order: usize, alpha: f64) -> Result<Self> {
        let order = order.max(1);
        Self::new(order, alpha, vec![1.0 / order as f64; order])
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::InvalidArgument(
                "n-gram order must be at least 1".into(),
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.lambdas.len() != self.order {
            return Err(Error::InvalidArgument(format!(
                "expected {} interpolation weights, got {}",
                self.order,
                self.lambdas.len()
            )));
        }
        if self.lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidArgument(
                "interpolation weights must be >= 0".into(),
            ));
        }
        let sum: f64 = self.lambdas.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "interpolation weights sum to {sum}"
            )));
        }
        Ok(())
    }
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig::uniform(3, 0.1).expect("default config is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
struct ContextCounts {
    counts: Vec<u64>,
    total: u64,
}

/// Counts for context lengths `0..order`.
#[derive(Debug, Clone, PartialEq)]
struct CountTable {
    by_len: Vec<HashMap<Vec<TokenId>, ContextCounts>>,
}

impl CountTable {
    fn empty(order: usize) -> Self {
        CountTable {
            by_len: vec![HashMap::new(); order],
        }
    }

    fn accumulate(&mut self, corpus: &Corpus, vocab_size: usize) {
        let order = self.by_len.len();
        for s in corpus.iter() {
            let mut history = vec![EOS; order - 1];
            for &w in s.ids() {
                for k in 0..order {
                    let ctx = &history[history.len() - k..];
                    let entry =
                        self.by_len[k]
                            .entry(ctx.to_vec())
                            .or_insert_with(|| ContextCounts {
                                counts: vec![0; vocab_size],
                                total: 0,
                            });
                    entry.counts[w as usize] += 1;
                    entry.total += 1;
                }
                history.push(w);
            }
        }
    }

    /// Adds this table's interpolated distribution, scaled by `weight`, to `out`.
    fn add_interpolated(
        &self,
        history: &[TokenId],
        config: &LmConfig,
        weight: f64,
        out: &mut [f64],
    ) {
        let v = out.len();
        let alpha = config.alpha;
        for (k, map) in self.by_len.iter().enumerate() {
            let lambda = config.lambdas[k];
            if lambda == 0.0 {
                continue;
            }
            let ctx = &history[history.len() - k..];
            match map.get(ctx) {
                Some(cc) => {
                    let denom = cc.total as f64 + alpha * v as f64;
                    for (o, &c) in out.iter_mut().zip(&cc.counts) {
                        *o += weight * lambda * ((c as f64 + alpha) / denom);
                    }
                }
                None => {
                    let u = weight * lambda * (1.0 / v as f64);
                    for o in out.iter_mut() {
                        *o += u;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Component {
    weight: f64,
    table: CountTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    config: LmConfig,
    vocab: Vocab,
    components: Vec<Component>,
}

impl NGramModel {
    /// Trains on all n-gram windows of `corpus`, `EOS` included.
    pub fn train(corpus: &Corpus, vocab: &Vocab, config: &LmConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::Empty("cannot train on an empty corpus".into()));
        }
        corpus.check_ids(vocab.len())?;
        let mut table = CountTable::empty(config.order);
        table.accumulate(corpus, vocab.len());
        Ok(NGramModel {
            config: config.clone(),
            vocab: vocab.clone(),
            components: vec![Component { weight: 1.0, table }],
        })
    }

    /// A model with no counts: every conditional is uniform over the vocabulary.
    pub fn uniform(vocab: &Vocab) -> Self {
        let config = LmConfig::uniform(1, 1.0).expect("valid");
        NGramModel {
            config,
            vocab: vocab.clone(),
            components: vec![Component {
                weight: 1.0,
                table: CountTable::empty(1),
            }],
        }
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// `(1 − μ)·P_base + μ·P_domain`, where `P_domain` is trained on `domain`
    /// alone with the base configuration.
    pub fn finetune(&self, domain: &Corpus, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidArgument(format!(
                "mu must lie in [0, 1], got {mu}"
            )));
        }
        domain.check_ids(self.vocab.len())?;
        let domain_model = NGramModel::train(domain, &self.vocab, &self.config)?;
        Ok(self.mix(&domain_model, mu))
    }

    /// Mixes conditionals with `other`; `mu` is the weight on `other`.
    pub fn mix(&self, other: &NGramModel, mu: f64) -> Self {
        if mu == 0.0 {
            return self.clone();
        }
        if mu == 1.0 {
            return other.clone();
        }
        let mut components: Vec<Component> = self
            .components
            .iter()
            .map(|c| Component {
                weight: c.weight * (1.0 - mu),
                table: c.table.clone(),
            })
            .collect();
        components.extend(other.components.iter().map(|c| Component {
            weight: c.weight * mu,
            table: c.table.clone(),
        }));
        NGramModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            components,
        }
    }

    /// Picks `mu` from {0.1, …, 0.9} minimizing perplexity on `eval`; ties go
    /// to the smaller value.
    pub fn finetune_tuned(&self, domain: &Corpus, eval: &Corpus) -> Result<(Self, f64)> {
        let domain_model = NGramModel::train(domain, &self.vocab, &self.config)?;
        eval.check_ids(self.vocab.len())?;
        let mut best: Option<(Self, f64, f64)> = None;
        for step in 1..=9 {
            let mu = step as f64 / 10.0;
            let m = self.mix(&domain_model, mu);
            let ppl = perplexity(&m, eval)?;
            if best.as_ref().is_none_or(|(_, _, b)| ppl < *b) {
                best = Some((m, mu, ppl));
            }
        }
        let (m, mu, _) = best.expect("grid is non-empty");
        Ok((m, mu))
    }

    fn check_compatible(&self, other: &NGramModel) -> Result<()> {
        if self.vocab != other.vocab {
            return Err(Error::VocabMismatch(
                "models use different vocabularies".into(),
            ));
        }
        if self.config != other.config {
            return Err(Error::VocabMismatch(
                "models use different n-gram configurations".into(),
            ));
        }
        Ok(())
    }

    /// Mixes with a separately trained domain model of the same shape.
    pub fn finetune_with(&self, domain_model: &NGramModel, mu: f64) -> Result<Self> {
        self.check_compatible(domain_model)?;
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidArgument(format!(
                "mu must lie in [0, 1], got {mu}"
            )));
        }
        Ok(self.mix(domain_model, mu))
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn next_dist_into(&self, prefix: &[TokenId], out: &mut Vec<f64>) {
        let order = self.config.order;
        let mut history = [EOS; 16];
        let hist: Vec<TokenId>;
        let history: &[TokenId] = if order <= 16 {
            let pad = (order - 1).saturating_sub(prefix.len());
            let tail = &prefix[prefix.len() - (order - 1 - pad)..];
            history[pad..order - 1].copy_from_slice(tail);
            &history[..order - 1]
        } else {
            let mut h = vec![EOS; order - 1];
            h.extend_from_slice(prefix);
            hist = h;
            &hist[hist.len() - (order - 1)..]
        };
        out.clear();
        out.resize(self.vocab.len(), 0.0);
        for c in &self.components {
            c.table
                .add_interpolated(history, &self.config, c.weight, out);
        }
    }
}

/// A unigram model with explicit probabilities; handy for hand fixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramModel {
    probs: Vec<f64>,
}

impl UnigramModel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "unigram probabilities must be >= 0".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "unigram probabilities sum to {sum}"
            )));
        }
        Ok(UnigramModel { probs })
    }
}

impl LanguageModel for UnigramModel {
    fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    fn next_dist_into(&self, _prefix: &[TokenId], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.probs);
    }
}

/// `Σ_i log P(s_i | s_<i)`, including the `EOS` factor, in nats.
pub fn sentence_logprob<M: LanguageModel + ?Sized>(model: &M, s: &Sentence) -> f64 {
    let ids = s.ids();
    let mut dist = Vec::with_capacity(model.vocab_size());
    let mut lp = 0.0;
    for i in 0..ids.len() {
        model.next_dist_into(&ids[..i], &mut dist);
        lp += dist[ids[i] as usize].ln();
    }
    lp
}

/// Log-probability under ancestral sampling with `EOS` forced after
/// `max_len` words: a sentence of exactly `max_len` words carries no `EOS`
/// factor.
pub fn sentence_logprob_capped<M: LanguageModel + ?Sized>(
    model: &M,
    s: &Sentence,
    max_len: usize,
) -> f64 {
    let ids = s.ids();
    let n = if s.word_len() == max_len {
        ids.len() - 1
    } else {
        ids.len()
    };
    let mut dist = Vec::with_capacity(model.vocab_size());
    let mut lp = 0.0;
    for i in 0..n {
        model.next_dist_into(&ids[..i], &mut dist);
        lp += dist[ids[i] as usize].ln();
    }
    lp
}

/// Ancestral sample; `EOS` is forced once `max_len` words have been drawn.
pub fn sample_sentence<M, R>(model: &M, rng: &mut R, max_len: usize) -> Sentence
where
    M: LanguageModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut ids: Vec<TokenId> = Vec::with_capacity(max_len + 1);
    let mut dist = Vec::with_capacity(model.vocab_size());
    while ids.len() < max_len {
        model.next_dist_into(&ids, &mut dist);
        let w = categorical(rng, &dist) as TokenId;
        if w == EOS {
            break;
        }
        ids.push(w);
    }
    Sentence::from_words(ids).expect("EOS is never pushed as a word")
}

/// `exp(−Σ log P(s) / Σ |s|)` with `EOS` counted in `|s|`.
pub fn perplexity<M: LanguageModel + ?Sized>(model: &M, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("perplexity of an empty corpus".into()));
    }
    corpus.check_ids(model.vocab_size())?;
    let lp: f64 = corpus.iter().map(|s| sentence_logprob(model, s)).sum();
    Ok((-lp / corpus.token_count() as f64).exp())
}

// ---------------------------------------------------------------------------
// Model file
//
// little-endian:
//   "MCTL" | version u32 | order u32 | V u32 | alpha f64 | lambda f64 × order
//   | V × (len u32, utf-8 bytes)                      vocabulary, id order
//   | n_components u32
//   | per component: weight f64 | n_contexts u64
//   |   per context, sorted by (ids lexicographically):
//   |     len u32 | ids u32 × len | counts u64 × V
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 4] = b"MCTL";
const MODEL_VERSION: u32 = 1;

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format("trailing bytes".into()));
        }
        Ok(())
    }
}

impl NGramModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let v = self.vocab.len();
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config.order as u32).to_le_bytes());
        out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(&self.config.alpha.to_le_bytes());
        for l in &self.config.lambdas {
            out.extend_from_slice(&l.to_le_bytes());
        }
        for t in self.vocab.tokens() {
            out.extend_from_slice(&(t.len() as u32).to_le_bytes());
            out.extend_from_slice(t.as_bytes());
        }
        out.extend_from_slice(&(self.components.len() as u32).to_le_bytes());
        for c in &self.components {
            out.extend_from_slice(&c.weight.to_le_bytes());
            let mut contexts: Vec<(&Vec<TokenId>, &ContextCounts)> =
                c.table.by_len.iter().flat_map(|m| m.iter()).collect();
            contexts.sort_by(|a, b| a.0.cmp(b.0));
            out.extend_from_slice(&(contexts.len() as u64).to_le_bytes());
            for (ctx, cc) in contexts {
                out.extend_from_slice(&(ctx.len() as u32).to_le_bytes());
                for id in ctx {
                    out.extend_from_slice(&id.to_le_bytes());
                }
                for n in &cc.counts {
                    out.extend_from_slice(&n.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4)? != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {version}"
            )));
        }
        let order = r.u32()? as usize;
        let v = r.u32()? as usize;
        if order == 0 || order > 64 || v < 2 {
            return Err(Error::Format("implausible model header".into()));
        }
        let alpha = r.f64()?;
        let lambdas = (0..order).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let config = LmConfig::new(order, alpha, lambdas)?;
        let mut tokens = Vec::with_capacity(v);
        for _ in 0..v {
            let n = r.u32()? as usize;
            let s = std::str::from_utf8(r.bytes(n)?)
                .map_err(|_| Error::Format("vocabulary token is not UTF-8".into()))?;
            tokens.push(s.to_string());
        }
        let vocab = Vocab::from_tokens(tokens)?;
        let n_comp = r.u32()? as usize;
        if n_comp == 0 {
            return Err(Error::Format("model has no components".into()));
        }
        let mut components = Vec::with_capacity(n_comp);
        for _ in 0..n_comp {
            let weight = r.f64()?;
            let n_ctx = r.u64()?;
            let mut table = CountTable::empty(order);
            for _ in 0..n_ctx {
                let len = r.u32()? as usize;
                if len >= order {
                    return Err(Error::Format("context longer than order - 1".into()));
                }
                let ctx = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
                let counts = (0..v).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
                let total = counts.iter().sum();
                table.by_len[len].insert(ctx, ContextCounts { counts, total });
            }
            components.push(Component { weight, table });
        }
        r.finish()?;
        Ok(NGramModel {
            config,
            vocab,
            components,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_corpus, LoadOptions};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn corpus(text: &str) -> (Corpus, Vocab) {
        parse_corpus(text, None, &LoadOptions::default(), "t").unwrap()
    }

    fn random_prefix(rng: &mut impl Rng, v: usize) -> Vec<TokenId> {
        let len = rng.random_range(0..6);
        (0..len)
            .map(|_| {
                let t = rng.random_range(0..v as TokenId - 1);
                if t >= EOS {
                    t + 1
                } else {
                    t
                }
            })
            .collect()
    }

    #[test]
    fn unigram_counts_in_small_alpha_limit() {
        let (c, v) = corpus("a a\n");
        let m = NGramModel::train(&c, &v, &LmConfig::uniform(1, 1e-9).unwrap()).unwrap();
        let d = m.next_dist(&[]);
        let a = v.id("a").unwrap() as usize;
        assert!((d[a] - 2.0 / 3.0).abs() < 1e-6);
        assert!((d[EOS as usize] - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn add_one_formula() {
        let (c, v) = corpus("a b a\nb\nc a\n");
        let m = NGramModel::train(&c, &v, &LmConfig::uniform(1, 1.0).unwrap()).unwrap();
        let d = m.next_dist(&[]);
        // T = 9 positions (6 words + 3 EOS), V = 5
        let a = v.id("a").unwrap() as usize;
        assert_eq!(d[a], (3.0 + 1.0) / (9.0 + 5.0));
        assert_eq!(d[EOS as usize], (3.0 + 1.0) / (9.0 + 5.0));
        assert_eq!(d[0], 1.0 / 14.0);
    }

    #[test]
    fn bigram_matches_hand_computation() {
        // "a b" and "b"; padded: (EOS→a, a→b, b→EOS), (EOS→b, b→EOS)
        let (c, v) = corpus("a b\nb\n");
        let cfg = LmConfig::new(2, 0.5, vec![0.25, 0.75]).unwrap();
        let m = NGramModel::train(&c, &v, &cfg).unwrap();
        let (a, b) = (v.id("a").unwrap() as usize, v.id("b").unwrap() as usize);
        // unigram counts: a 1, b 2, EOS 2, unk 0; T = 5, V = 4 → denom 7
        // bigram after "a": b 1; T = 1 → denom 3
        let d = m.next_dist(&[a as TokenId]);
        let uni = |c: f64| (c + 0.5) / 7.0;
        let big = |c: f64| (c + 0.5) / 3.0;
        assert!((d[b] - (0.25 * uni(2.0) + 0.75 * big(1.0))).abs() < 1e-15);
        assert!((d[EOS as usize] - (0.25 * uni(2.0) + 0.75 * big(0.0))).abs() < 1e-15);
        assert!((d[a] - (0.25 * uni(1.0) + 0.75 * big(0.0))).abs() < 1e-15);
        // start context: EOS → a 1, EOS → b 1; T = 2 → denom 4
        let d0 = m.next_dist(&[]);
        assert!((d0[a] - (0.25 * uni(1.0) + 0.75 * (1.5 / 4.0))).abs() < 1e-15);
        // unseen context "unk" backs off to uniform at the bigram level
        let du = m.next_dist(&[0]);
        assert!((du[b] - (0.25 * uni(2.0) + 0.75 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn next_dist_is_normalized_and_positive() {
        let (c, v) = corpus("a b c\nc b a d\nd d\na\n");
        let m = NGramModel::train(&c, &v, &LmConfig::default()).unwrap();
        let mut rng = stream(3, 0);
        for _ in 0..100 {
            let p = random_prefix(&mut rng, v.len());
            let d = m.next_dist(&p);
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn unigram_ignores_prefix() {
        let (c, v) = corpus("a b c\nc b a d\n");
        let m = NGramModel::train(&c, &v, &LmConfig::uniform(1, 0.1).unwrap()).unwrap();
        assert_eq!(m.next_dist(&[2, 3]), m.next_dist(&[4]));
    }

    #[test]
    fn finetune_identities_are_bitwise() {
        let (g, v) = corpus("a b c\nc b a d\nd d\n");
        let (d, _) = parse_corpus("a a\nd c\n", Some(&v), &LoadOptions::default(), "d").unwrap();
        let base = NGramModel::train(&g, &v, &LmConfig::default()).unwrap();
        let dom = NGramModel::train(&d, &v, &LmConfig::default()).unwrap();
        let f0 = base.finetune(&d, 0.0).unwrap();
        let f1 = base.finetune(&d, 1.0).unwrap();
        let fh = base.finetune(&d, 0.5).unwrap();
        let mut rng = stream(5, 0);
        for _ in 0..50 {
            let p = random_prefix(&mut rng, v.len());
            assert_eq!(f0.next_dist(&p), base.next_dist(&p));
            assert_eq!(f1.next_dist(&p), dom.next_dist(&p));
            let (pb, pd, ph) = (base.next_dist(&p), dom.next_dist(&p), fh.next_dist(&p));
            for i in 0..v.len() {
                assert!((ph[i] - (0.5 * pb[i] + 0.5 * pd[i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn finetune_convex_combination_example() {
        let base = UnigramModel::new(vec![0.3, 0.5, 0.2]).unwrap();
        let dom = UnigramModel::new(vec![0.2, 0.4, 0.4]).unwrap();
        let mixed: Vec<f64> = base
            .next_dist(&[])
            .iter()
            .zip(dom.next_dist(&[]))
            .map(|(b, d)| 0.5 * b + 0.5 * d)
            .collect();
        assert!((mixed[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn finetune_rejects_vocab_mismatch() {
        let (g, v) = corpus("a b\n");
        let (g2, v2) = corpus("x y z\n");
        let base = NGramModel::train(&g, &v, &LmConfig::default()).unwrap();
        let other = NGramModel::train(&g2, &v2, &LmConfig::default()).unwrap();
        assert!(base.finetune_with(&other, 0.5).is_err());
        assert!(base.finetune(&g2, 0.5).is_err());
    }

    #[test]
    fn tuned_mu_is_on_grid() {
        let (g, v) = corpus("a b c\nc b a d\nd d\n");
        let (d, _) =
            parse_corpus("a a\nd c\na a d\n", Some(&v), &LoadOptions::default(), "d").unwrap();
        let base = NGramModel::train(&g, &v, &LmConfig::default()).unwrap();
        let (_, mu) = base.finetune_tuned(&d, &d).unwrap();
        assert!((0.1..=0.9).contains(&mu));
        // evaluating on the domain itself favours the domain model
        assert!(mu >= 0.5);
    }

    #[test]
    fn logprob_two_factor_case() {
        let (c, v) = corpus("a b\nb a\n");
        let m = NGramModel::train(&c, &v, &LmConfig::default()).unwrap();
        let a = v.id("a").unwrap();
        let s = Sentence::from_words(vec![a]).unwrap();
        let expected = m.next_dist(&[])[a as usize].ln() + m.next_dist(&[a])[EOS as usize].ln();
        assert!((sentence_logprob(&m, &s) - expected).abs() < 1e-12);
        assert!(sentence_logprob(&m, &s) < 0.0);
    }

    #[test]
    fn forced_eos_model_samples_empty_sentence() {
        let m = UnigramModel::new(vec![0.0, 1.0, 0.0]).unwrap();
        let mut rng = stream(1, 0);
        for _ in 0..10 {
            assert_eq!(sample_sentence(&m, &mut rng, 5).ids(), &[EOS]);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_capped() {
        let m = UnigramModel::new(vec![0.1, 0.05, 0.85]).unwrap();
        let a = sample_sentence(&m, &mut stream(9, 2), 4);
        let b = sample_sentence(&m, &mut stream(9, 2), 4);
        assert_eq!(a, b);
        for i in 0..200 {
            assert!(sample_sentence(&m, &mut stream(9, i), 4).word_len() <= 4);
        }
    }

    #[test]
    fn unigram_sampling_frequencies_within_three_sigma() {
        let probs = vec![0.1, 0.2, 0.3, 0.4];
        let m = UnigramModel::new(probs.clone()).unwrap();
        let mut rng = stream(11, 0);
        let mut counts = [0u64; 4];
        let mut total = 0u64;
        let n_sent = 100_000;
        for _ in 0..n_sent {
            let s = sample_sentence(&m, &mut rng, 50);
            for &t in s.ids() {
                counts[t as usize] += 1;
                total += 1;
            }
        }
        // sentences capped at 50 words are negligible: 0.8^50 ≈ 1.4e-5
        for (i, &p) in probs.iter().enumerate() {
            let freq = counts[i] as f64 / total as f64;
            let sigma = (p * (1.0 - p) / total as f64).sqrt();
            assert!(
                (freq - p).abs() < 3.0 * sigma + 1e-4,
                "token {i}: {freq} vs {p}"
            );
        }
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let (c, v) = corpus("a b c\nd\n\n");
        let m = NGramModel::uniform(&v);
        assert!((perplexity(&m, &c).unwrap() - v.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn mle_beats_uniform_on_training_data() {
        let (c, v) = corpus("a b c\nc b a d\nd d\na a a\n");
        let m = NGramModel::train(&c, &v, &LmConfig::uniform(1, 1e-6).unwrap()).unwrap();
        let u = NGramModel::uniform(&v);
        assert!(perplexity(&m, &c).unwrap() <= perplexity(&u, &c).unwrap());
    }

    #[test]
    fn perplexity_hand_value() {
        // unigram over {unk, eos, a}: probs from counts a=1, eos=2 with α=1:
        // T = 3, V = 3 → P(unk)=1/6, P(eos)=3/6, P(a)=2/6
        let (c, v) = corpus("a\n\n");
        let m = NGramModel::train(&c, &v, &LmConfig::uniform(1, 1.0).unwrap()).unwrap();
        let expected = (-((2.0f64 / 6.0).ln() + 2.0 * (3.0f64 / 6.0).ln()) / 3.0).exp();
        assert!((perplexity(&m, &c).unwrap() - expected).abs() < 1e-12);
        assert!(perplexity(&m, &Corpus::default()).is_err());
    }

    #[test]
    fn model_file_round_trip() {
        let (g, v) = corpus("a b c\nc b a d\nd d\n");
        let (d, _) = parse_corpus("a a\nd c\n", Some(&v), &LoadOptions::default(), "d").unwrap();
        let base = NGramModel::train(&g, &v, &LmConfig::default()).unwrap();
        let ft = base.finetune(&d, 0.3).unwrap();
        let bytes = ft.to_bytes();
        assert_eq!(&bytes[..4], b"MCTL");
        assert_eq!(bytes, ft.to_bytes(), "serialization must be deterministic");
        let back = NGramModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut rng = stream(4, 0);
        for _ in 0..1000 {
            let s = sample_sentence(&ft, &mut rng, 8);
            assert_eq!(
                sentence_logprob(&ft, &s).to_bits(),
                sentence_logprob(&back, &s).to_bits()
            );
        }
        assert!(NGramModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(NGramModel::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn support_lower_bound(seed in any::<u64>()) {
            let (c, v) = corpus("a b c\nc b a d\nd d\na\n");
            let cfg = LmConfig::default();
            let m = NGramModel::train(&c, &v, &cfg).unwrap();
            let mut rng = stream(seed, 0);
            let p = random_prefix(&mut rng, v.len());
            let d = m.next_dist(&p);
            // the unigram term alone contributes at least λ_1 α / (T + α V)
            let t = c.token_count() as f64;
            let bound = cfg.lambdas[0] * cfg.alpha / (t + cfg.alpha * v.len() as f64);
            prop_assert!(d.iter().all(|&x| x >= bound));
        }
    }
}
