//! Tailoring the output distribution of a fine-tuned autoregressive language
//! model.
//!
//! A fine-tuned model over-estimates some regions of sentence space and
//! under-estimates others. This crate learns density-ratio estimators that
//! flag over-estimated sentences, truncates their probability mass, and draws
//! samples from the resulting tailored distribution with plain rejection
//! sampling, sequential Monte Carlo, or early rejection sampling. Every piece
//! can be checked against exact enumeration on small vocabularies.
//!
//! Module map:
//!
//! * [`corpus`]: vocabulary, sentences, corpus loading and splitting.
//! * [`lm`]: interpolated add-α n-gram language model with fine-tuning.
//! * [`ratio`]: convolutional ratio estimators, prefix (dual) estimators and
//!   hierarchical stacks.
//! * [`tailor`]: the tailored distribution and the three samplers.
//! * [`metrics`]: PPL, Rev-PPL, EMD over lengths and word frequencies.
//! * [`oracle`]: brute-force enumeration and statistical tests.
//! * [`fixtures`]: synthetic corpora with known generators.
//! * [`verify`]: end-to-end oracle checks on an enumerable configuration.
//! * [`cli`]: the `mctailor` command-line pipeline.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod fixtures;
pub mod lm;
pub mod metrics;
pub mod oracle;
pub mod ratio;
pub mod rng;
pub mod tailor;
pub mod verify;

pub use corpus::{Corpus, Sentence, TokenId, Vocab, EOS, UNK};
pub use error::{Error, Result};
pub use lm::{LanguageModel, LmConfig, NGramModel};
pub use ratio::{EstimatorStack, PrefixRatio, SentenceRatio};
pub use tailor::{SampleBatch, SampleStats, TailoredDistribution};
