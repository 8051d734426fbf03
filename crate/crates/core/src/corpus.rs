//! Vocabulary, sentences and corpora.
//!
//! Corpus files are UTF-8 with one sentence per line and tokens separated by
//! whitespace. Vocabulary files hold one token per line; the line number is
//! the token id and lines 0 and 1 are always `<unk>` and `<eos>`.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    id_of: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// A vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            id_of: HashMap::new(),
        };
        v.insert(UNK_TOKEN);
        v.insert(EOS_TOKEN);
        v
    }

    /// Builds a vocabulary from an id-ordered token list. Ids 0 and 1 must be
    /// `<unk>` and `<eos>`; tokens must be unique and free of whitespace.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if tokens.first().map(String::as_str) != Some(UNK_TOKEN) {
            return Err(Error::InvalidVocab(format!("id 0 must be {UNK_TOKEN}")));
        }
        if tokens.get(1).map(String::as_str) != Some(EOS_TOKEN) {
            return Err(Error::InvalidVocab(format!("id 1 must be {EOS_TOKEN}")));
        }
        let mut id_of = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocab(format!(
                    "token {i} is empty or has whitespace"
                )));
            }
            if id_of.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidVocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, id_of })
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.id_of.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.id_of.insert(token.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id of `word`, or `UNK` when out of vocabulary.
    pub fn encode_word(&self, word: &str) -> TokenId {
        self.id(word).unwrap_or(UNK)
    }

    /// Encodes whitespace-separated text, truncating to `max_len` words.
    pub fn encode(&self, text: &str, max_len: usize) -> Sentence {
        let ids = text
            .split_whitespace()
            .take(max_len)
            .map(|w| self.encode_word(w))
            .collect();
        Sentence::from_words(ids).expect("encoded words never contain EOS")
    }

    /// Decodes the words of a sentence (EOS omitted), joined by single spaces.
    pub fn decode(&self, sentence: &Sentence) -> String {
        self.decode_ids(sentence.words())
    }

    pub fn decode_ids(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Token ids of one sentence, always terminated by a single `EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence(Vec<TokenId>);

impl Sentence {
    /// Wraps ids that already end in `EOS`.
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        match ids.iter().position(|&t| t == EOS) {
            Some(p) if p + 1 == ids.len() => Ok(Sentence(ids)),
            Some(_) => Err(Error::Format(
                "EOS must appear exactly once, at the end".into(),
            )),
            None => Err(Error::Format("sentence is missing its terminal EOS".into())),
        }
    }

    /// Appends `EOS` to a word sequence.
    pub fn from_words(mut words: Vec<TokenId>) -> Result<Self> {
        if words.contains(&EOS) {
            return Err(Error::Format("word sequence contains EOS".into()));
        }
        words.push(EOS);
        Ok(Sentence(words))
    }

    /// All ids including the terminal `EOS`.
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    /// Ids without the terminal `EOS`.
    pub fn words(&self) -> &[TokenId] {
        &self.0[..self.0.len() - 1]
    }

    /// Number of positions including `EOS`.
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of words, excluding `EOS`.
    pub fn word_len(&self) -> usize {
        self.0.len() - 1
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|t| t.to_string()).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub source: String,
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>, source: impl Into<String>) -> Self {
        Corpus {
            sentences,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sentence> {
        self.sentences.iter()
    }

    /// Total positions including one `EOS` per sentence.
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Checks that every id is below `vocab_size`.
    pub fn check_ids(&self, vocab_size: usize) -> Result<()> {
        for s in &self.sentences {
            if let Some(&bad) = s.ids().iter().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::VocabMismatch(format!(
                    "token id {bad} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    /// Decoded text, one sentence per line.
    pub fn to_text(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            out.push_str(&vocab.decode(s));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    pub max_len: usize,
    pub min_count: usize,
    pub lowercase: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            max_len: 32,
            min_count: 1,
            lowercase: false,
        }
    }
}

fn normalize_lines(text: &str, lowercase: bool) -> Vec<String> {
    text.lines()
        .map(|l| {
            let l = l.trim_end_matches('\r');
            if lowercase {
                l.to_lowercase()
            } else {
                l.to_string()
            }
        })
        .collect()
}

/// Builds a vocabulary from tokens seen at least `min_count` times, in order
/// of first occurrence.
pub fn build_vocab<'a, I>(texts: I, min_count: usize, lowercase: bool) -> Vocab
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for text in texts {
        for line in normalize_lines(text, lowercase) {
            for w in line.split_whitespace() {
                let c = counts.entry(w.to_string()).or_insert_with(|| {
                    order.push(w.to_string());
                    0
                });
                *c += 1;
            }
        }
    }
    let mut vocab = Vocab::new();
    for w in order {
        if counts[&w] >= min_count.max(1) && w != UNK_TOKEN && w != EOS_TOKEN {
            vocab.insert(&w);
        }
    }
    vocab
}

/// Parses corpus text. Builds the vocabulary when none is given.
pub fn parse_corpus(
    text: &str,
    vocab: Option<&Vocab>,
    opts: &LoadOptions,
    source: &str,
) -> Result<(Corpus, Vocab)> {
    if opts.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    let lines = normalize_lines(text, opts.lowercase);
    if lines.is_empty() {
        return Err(Error::Empty(format!("corpus {source} has no lines")));
    }
    let vocab = match vocab {
        Some(v) => {
            if v.token(UNK) != Some(UNK_TOKEN) || v.token(EOS) != Some(EOS_TOKEN) {
                return Err(Error::InvalidVocab(
                    "vocabulary lacks <unk>/<eos> at ids 0/1".into(),
                ));
            }
            v.clone()
        }
        None => build_vocab(lines.iter().map(String::as_str), opts.min_count, false),
    };
    let sentences = lines
        .iter()
        .map(|l| vocab.encode(l, opts.max_len))
        .collect();
    Ok((Corpus::new(sentences, source), vocab))
}

/// Loads a corpus file.
pub fn load_corpus(
    path: impl AsRef<Path>,
    vocab: Option<&Vocab>,
    opts: &LoadOptions,
) -> Result<(Corpus, Vocab)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{} is not valid UTF-8", path.display())))?;
    parse_corpus(&text, vocab, opts, &path.display().to_string())
}

/// Shuffles deterministically under `seed` and splits by `fractions`.
///
/// Sizes are the floors of `fraction * n`; the remainder goes to train.
pub fn split(
    corpus: &Corpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus)> {
    let (ft, fe, fs) = fractions;
    if [ft, fe, fs].iter().any(|f| !f.is_finite() || *f < 0.0) || ft <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "bad split fractions {fractions:?}"
        )));
    }
    if ((ft + fe + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions sum to {}, expected 1",
            ft + fe + fs
        )));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(Error::Empty(format!(
            "cannot split a corpus of {n} sentences"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = (fe * n as f64 + 1e-9).floor() as usize;
    let n_test = (fs * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_eval - n_test;
    let take = |range: &[usize], tag: &str| {
        Corpus::new(
            range.iter().map(|&i| corpus.sentences[i].clone()).collect(),
            format!("{}#{tag}", corpus.source),
        )
    };
    Ok((
        take(&idx[..n_train], "train"),
        take(&idx[n_train..n_train + n_eval], "eval"),
        take(&idx[n_train + n_eval..], "test"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opts(max_len: usize) -> LoadOptions {
        LoadOptions {
            max_len,
            ..LoadOptions::default()
        }
    }

    #[test]
    fn builds_vocab_from_text() {
        let (c, v) = parse_corpus("a b\nb\n", None, &opts(10), "t").unwrap();
        assert_eq!(v.tokens(), &["<unk>", "<eos>", "a", "b"]);
        assert_eq!(c.len(), 2);
        assert_eq!(c.sentences[0].ids(), &[2, 3, EOS]);
        assert_eq!(c.sentences[1].ids(), &[3, EOS]);
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = Vocab::from_tokens(["<unk>", "<eos>", "a"]).unwrap();
        let (c, _) = parse_corpus("a c\n", Some(&v), &opts(10), "t").unwrap();
        assert_eq!(c.sentences[0].ids(), &[2, UNK, EOS]);
    }

    #[test]
    fn long_lines_are_truncated() {
        let line: Vec<String> = (0..100).map(|i| format!("w{}", i % 7)).collect();
        let (c, _) = parse_corpus(&line.join(" "), None, &opts(6), "t").unwrap();
        assert_eq!(c.sentences[0].len(), 7);
        assert_eq!(c.sentences[0].word_len(), 6);
        assert_eq!(*c.sentences[0].ids().last().unwrap(), EOS);
    }

    #[test]
    fn min_count_filters_rare_tokens() {
        let text = "a a b\na c\n";
        let o = LoadOptions {
            min_count: 2,
            ..opts(10)
        };
        let (c, v) = parse_corpus(text, None, &o, "t").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(c.sentences[0].ids(), &[2, 2, UNK, EOS]);
    }

    #[test]
    fn lowercase_flag() {
        let o = LoadOptions {
            lowercase: true,
            ..opts(10)
        };
        let (_, v) = parse_corpus("Yes .\nyes\n", None, &o, "t").unwrap();
        assert_eq!(v.len(), 4);
        let (_, v) = parse_corpus("Yes .\nyes\n", None, &opts(10), "t").unwrap();
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        fs::write(&p, "").unwrap();
        assert!(matches!(
            load_corpus(&p, None, &opts(4)),
            Err(Error::Empty(_))
        ));
        assert!(matches!(
            load_corpus(dir.path().join("missing.txt"), None, &opts(4)),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn vocab_requires_reserved_tokens() {
        assert!(Vocab::from_tokens(["a", "<eos>"]).is_err());
        assert!(Vocab::from_tokens(["<unk>", "a"]).is_err());
        assert!(Vocab::from_tokens(["<unk>", "<eos>", "a", "a"]).is_err());
        assert!(Vocab::from_text("<unk>\n<eos>\nx\n").is_ok());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.txt");
        let v = build_vocab(["the cat sat", "a dog"], 1, false);
        v.save(&p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("<unk>\n<eos>\n"));
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn sentence_invariants() {
        assert!(Sentence::new(vec![]).is_err());
        assert!(Sentence::new(vec![2, 3]).is_err());
        assert!(Sentence::new(vec![EOS, 2, EOS]).is_err());
        let s = Sentence::new(vec![EOS]).unwrap();
        assert_eq!(s.word_len(), 0);
        assert!(Sentence::from_words(vec![2, EOS]).is_err());
    }

    fn corpus_of(n: usize) -> Corpus {
        Corpus::new(
            (0..n)
                .map(|i| Sentence::from_words(vec![2 + i as TokenId]).unwrap())
                .collect(),
            "t",
        )
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let c = corpus_of(10);
        let (a, b, t) = split(&c, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (8, 1, 1));
        let again = split(&c, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(again.0, a);
        assert_eq!(again.1, b);
        let (a, b, t) = split(&c, (0.5, 0.5, 0.0), 7).unwrap();
        assert_eq!((a.len(), b.len(), t.len()), (5, 5, 0));
        let (a, _, t) = split(&corpus_of(7), (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!((a.len(), t.len()), (7 - 1 - 1, 1));
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split(&corpus_of(2), (0.8, 0.1, 0.1), 0).is_err());
        assert!(split(&corpus_of(10), (0.8, 0.1, 0.2), 0).is_err());
        assert!(split(&corpus_of(10), (0.0, 0.5, 0.5), 0).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(words in proptest::collection::vec("[a-z]{1,4}", 0..12)) {
            let text = words.join(" ");
            let vocab = build_vocab([text.as_str()], 1, false);
            let s = vocab.encode(&text, 64);
            prop_assert_eq!(vocab.decode(&s), text);
        }

        #[test]
        fn split_is_a_partition(n in 3usize..60, seed in any::<u64>(), te in 0usize..4, ts in 0usize..4) {
            let c = corpus_of(n);
            let fe = te as f64 * 0.1;
            let fs = ts as f64 * 0.1;
            let (a, b, t) = split(&c, (1.0 - fe - fs, fe, fs), seed).unwrap();
            let mut all: Vec<Sentence> = a.sentences.into_iter()
                .chain(b.sentences).chain(t.sentences).collect();
            all.sort();
            let mut orig = c.sentences.clone();
            orig.sort();
            prop_assert_eq!(all, orig);
        }

        #[test]
        fn load_is_deterministic(lines in proptest::collection::vec("[a-c ]{0,10}", 1..10)) {
            let text = format!("{}\nz", lines.join("\n"));
            let a = parse_corpus(&text, None, &opts(5), "t").unwrap();
            let b = parse_corpus(&text, None, &opts(5), "t").unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
