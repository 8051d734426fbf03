//! The `mctailor` command-line pipeline.
//!
//! Configuration is a flat `key = value` file (`#` starts a comment line).
//! Values are resolved in this order, later sources winning:
//!
//! 1. built-in defaults,
//! 2. the file given by `--config` (relative paths resolve against the file's
//!    directory),
//! 3. `--set key=value` flags, in order,
//! 4. the dedicated flags `--seed`, `--out`, `--workers` and `--tune-mu`.
//!
//! Unknown keys are rejected. Artifacts live in the output directory:
//! `vocab.txt`, `base.mctl`, `finetuned.mctl`, `stack/`, `samples.txt`,
//! `stats.txt`, `stats.json`, `metrics.txt`, `metrics.json` and `verify.txt`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 missing or bad
//! data (including sampler preconditions), 3 sampler starvation or exhausted
//! budget, 4 verification failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::corpus::{build_vocab, load_corpus, parse_corpus, Corpus, LoadOptions, Vocab};
use crate::error::Error;
use crate::lm::{LanguageModel, LmConfig, NGramModel};
use crate::metrics::{eval_lm_config, evaluate, EvalConfig};
use crate::ratio::{
    build_stack, load_stack, EstimatorStack, StackConfig, TrainConfig, DEFAULT_GAMMA_MAX,
};
use crate::rng::derive_seed;
use crate::tailor::{
    ers_sample, estimate_log_normalizer, rejection_sample, smc_sample, Algorithm, SamplerConfig,
    TailoredDistribution, DEFAULT_BUDGET,
};
use crate::verify::{run_enumerable_suite, VerifyConfig};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_STARVATION: i32 = 3;
pub const EXIT_VERIFY: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
    Verify(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Run(Error::InvalidArgument(_)) => EXIT_USAGE,
            CliError::Run(Error::Starvation(_)) => EXIT_STARVATION,
            CliError::Run(_) => EXIT_DATA,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Run(e) => write!(f, "{e}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "mctailor",
    version,
    about = "Tailor a fine-tuned n-gram model's output distribution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the vocabulary and train the base model on the general corpus.
    Pretrain(Common),
    /// Mix the base model with a model of the domain corpus.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pick mu on the `domain_eval` corpus.
        #[arg(long)]
        tune_mu: bool,
    },
    /// Train the stack of ratio estimators.
    BuildTailor(Common),
    /// Draw samples from the tailored distribution.
    Sample(Common),
    /// Sample and score against the domain test corpus.
    Evaluate(Common),
    /// Run the oracle suite on the built-in enumerable fixture.
    Verify(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print results as JSON.
    #[arg(long)]
    json: bool,
    /// Sampler worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

/// Every configuration key with its default, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("general", ""),
    ("domain_train", ""),
    ("domain_eval", ""),
    ("domain_test", ""),
    ("out", "out"),
    ("seed", "0"),
    ("workers", "1"),
    ("max_len", "32"),
    ("min_count", "1"),
    ("lowercase", "false"),
    ("order", "3"),
    ("alpha", "0.1"),
    ("lambdas", ""),
    ("mu", "0.5"),
    ("tune_mu", "false"),
    ("layers", "3"),
    ("dual", "true"),
    ("gamma_max", "20"),
    ("lr", "0.05"),
    ("batch_size", "32"),
    ("max_epochs", "100"),
    ("patience", "5"),
    ("embed_dim", "16"),
    ("algorithm", "ers"),
    ("n", "1000"),
    ("budget", "10000000"),
    ("n_is", "10000"),
    ("starvation_rate", ""),
    ("use_stack", "true"),
    ("verify_samples", "1000000"),
    ("verify_layers", "2"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub general: Option<PathBuf>,
    pub domain_train: Option<PathBuf>,
    pub domain_eval: Option<PathBuf>,
    pub domain_test: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub max_len: usize,
    pub min_count: usize,
    pub lowercase: bool,
    pub order: usize,
    pub alpha: f64,
    pub lambdas: Option<Vec<f64>>,
    pub mu: f64,
    pub tune_mu: bool,
    pub layers: usize,
    pub dual: bool,
    pub gamma_max: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub embed_dim: usize,
    pub algorithm: Algorithm,
    pub n: usize,
    pub budget: u64,
    pub n_is: usize,
    pub starvation_rate: Option<f64>,
    pub use_stack: bool,
    pub verify_samples: usize,
    pub verify_layers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            general: None,
            domain_train: None,
            domain_eval: None,
            domain_test: None,
            out: PathBuf::from("out"),
            seed: 0,
            workers: 1,
            max_len: 32,
            min_count: 1,
            lowercase: false,
            order: 3,
            alpha: 0.1,
            lambdas: None,
            mu: 0.5,
            tune_mu: false,
            layers: 3,
            dual: true,
            gamma_max: DEFAULT_GAMMA_MAX,
            lr: train.learning_rate,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            patience: train.patience,
            embed_dim: train.embed_dim,
            algorithm: Algorithm::Ers,
            n: 1000,
            budget: DEFAULT_BUDGET,
            n_is: 10_000,
            starvation_rate: None,
            use_stack: true,
            verify_samples: 1_000_000,
            verify_layers: 2,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "bad value {value:?} for {key} (expected true or false)"
        ))),
    }
}

impl RunConfig {
    /// Sets one key. Relative paths are joined onto `base` when given.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> CliResult<()> {
        let path = |v: &str| {
            let p = PathBuf::from(v);
            match base {
                Some(b) if p.is_relative() => b.join(p),
                _ => p,
            }
        };
        let opt_path = |v: &str| if v.is_empty() { None } else { Some(path(v)) };
        match key {
            "general" => self.general = opt_path(value),
            "domain_train" => self.domain_train = opt_path(value),
            "domain_eval" => self.domain_eval = opt_path(value),
            "domain_test" => self.domain_test = opt_path(value),
            "out" => self.out = path(value),
            "seed" => self.seed = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            "lowercase" => self.lowercase = parse_bool(key, value)?,
            "order" => self.order = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "lambdas" => {
                self.lambdas = if value.is_empty() {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|v| parse_value(key, v.trim()))
                            .collect::<CliResult<_>>()?,
                    )
                }
            }
            "mu" => self.mu = parse_value(key, value)?,
            "tune_mu" => self.tune_mu = parse_bool(key, value)?,
            "layers" => self.layers = parse_value(key, value)?,
            "dual" => self.dual = parse_bool(key, value)?,
            "gamma_max" => self.gamma_max = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "algorithm" => {
                self.algorithm = value
                    .parse()
                    .map_err(|e: Error| CliError::Usage(e.to_string()))?
            }
            "n" => self.n = parse_value(key, value)?,
            "budget" => self.budget = parse_value(key, value)?,
            "n_is" => self.n_is = parse_value(key, value)?,
            "starvation_rate" => {
                self.starvation_rate = if value.is_empty() {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "use_stack" => self.use_stack = parse_bool(key, value)?,
            "verify_samples" => self.verify_samples = parse_value(key, value)?,
            "verify_layers" => self.verify_layers = parse_value(key, value)?,
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown configuration key {key:?}"
                )))
            }
        }
        Ok(())
    }

    /// Applies a configuration file's text.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> CliResult<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key = value", i + 1))
            })?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Usage(format!(
                    "config line {}: duplicate key {k:?}",
                    i + 1
                )));
            }
            self.set(k, v.trim(), base)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if !(1..=1024).contains(&self.max_len) {
            return bad(format!(
                "max_len must lie in 1..=1024, got {}",
                self.max_len
            ));
        }
        if !(1..=8).contains(&self.order) {
            return bad(format!("order must lie in 1..=8, got {}", self.order));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return bad(format!("mu must lie in [0, 1], got {}", self.mu));
        }
        if !(1..=16).contains(&self.layers) {
            return bad(format!("layers must lie in 1..=16, got {}", self.layers));
        }
        if !(self.gamma_max.is_finite() && self.gamma_max > 1.0) {
            return bad(format!("gamma_max must exceed 1, got {}", self.gamma_max));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 2 || self.max_epochs == 0 || self.patience == 0 || self.embed_dim == 0
        {
            return bad("batch_size ≥ 2 and max_epochs, patience, embed_dim ≥ 1 required".into());
        }
        if self.n == 0 || self.budget == 0 {
            return bad("n and budget must be positive".into());
        }
        if self.n_is < 1000 {
            return bad(format!("n_is must be at least 1000, got {}", self.n_is));
        }
        if let Some(r) = self.starvation_rate {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("starvation_rate must lie in [0, 1), got {r}"));
            }
        }
        if self.verify_samples < 1000 || !(1..=8).contains(&self.verify_layers) {
            return bad("verify_samples ≥ 1000 and verify_layers in 1..=8 required".into());
        }
        self.lm_config()?;
        Ok(())
    }

    pub fn lm_config(&self) -> CliResult<LmConfig> {
        let c = match &self.lambdas {
            Some(l) => LmConfig::new(self.order, self.alpha, l.clone()),
            None => LmConfig::uniform(self.order, self.alpha),
        };
        c.map_err(|e| CliError::Usage(e.to_string()))
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            max_len: self.max_len,
            min_count: self.min_count,
            lowercase: self.lowercase,
        }
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            budget: self.budget,
            workers: self.workers,
            starvation_rate: self.starvation_rate,
            ..SamplerConfig::default()
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            embed_dim: self.embed_dim,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            gamma_max: self.gamma_max,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

fn resolve(common: &Common, tune_mu: bool) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text, path.parent())?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim(), None)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if tune_mu {
        cfg.tune_mu = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a PathBuf> {
    p.as_ref().ok_or_else(|| {
        CliError::Run(Error::Precondition(format!(
            "configuration key {key} is not set"
        )))
    })
}

fn read_text(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|_| {
        CliError::Run(Error::Format(format!(
            "{} is not valid UTF-8",
            path.display()
        )))
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Run(Error::io(path, e)))
}

fn ensure_out(cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Run(Error::io(&cfg.out, e)))
}

fn load_model(cfg: &RunConfig, name: &str, upstream: &str) -> CliResult<NGramModel> {
    let path = cfg.out.join(name);
    if !path.exists() {
        return Err(CliError::Run(Error::Precondition(format!(
            "{} not found; run `mctailor {upstream}` first",
            path.display()
        ))));
    }
    Ok(NGramModel::load(&path)?)
}

fn load_tailor_stack(cfg: &RunConfig) -> CliResult<EstimatorStack> {
    if !cfg.use_stack {
        return Ok(EstimatorStack::empty());
    }
    let dir = cfg.out.join("stack");
    if !dir.exists() {
        return Err(CliError::Run(Error::Precondition(format!(
            "{} not found; run `mctailor build-tailor` first or set use_stack = false",
            dir.display()
        ))));
    }
    Ok(load_stack(&dir)?)
}

fn domain(cfg: &RunConfig, key: &str, p: &Option<PathBuf>, vocab: &Vocab) -> CliResult<Corpus> {
    let (c, _) = load_corpus(require(p, key)?, Some(vocab), &cfg.load_options())?;
    Ok(c)
}

/// `key = value` lines or a JSON object, from ordered pairs.
fn render(pairs: &[(&str, Value)], as_json: bool) -> String {
    if as_json {
        let map: serde_json::Map<String, Value> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        format!("{}\n", Value::Object(map))
    } else {
        let mut s = String::new();
        for (k, v) in pairs {
            let v = match v {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

fn cmd_pretrain(cfg: &RunConfig, as_json: bool) -> CliResult<String> {
    let general_path = require(&cfg.general, "general")?;
    let general_text = read_text(general_path)?;
    let domain_text = match &cfg.domain_train {
        Some(p) => Some(read_text(p)?),
        None => None,
    };
    let texts = std::iter::once(general_text.as_str()).chain(domain_text.as_deref());
    let vocab = build_vocab(texts, cfg.min_count, cfg.lowercase);
    let opts = cfg.load_options();
    let (general, vocab) = parse_corpus(
        &general_text,
        Some(&vocab),
        &opts,
        &general_path.display().to_string(),
    )?;
    let model = NGramModel::train(&general, &vocab, &cfg.lm_config()?)?;
    ensure_out(cfg)?;
    vocab.save(cfg.out.join("vocab.txt"))?;
    model.save(cfg.out.join("base.mctl"))?;
    Ok(render(
        &[
            ("vocab_size", json!(vocab.len())),
            ("sentences", json!(general.len())),
            ("tokens", json!(general.token_count())),
            ("order", json!(cfg.order)),
        ],
        as_json,
    ))
}

fn cmd_finetune(cfg: &RunConfig, as_json: bool) -> CliResult<String> {
    let base = load_model(cfg, "base.mctl", "pretrain")?;
    let train = domain(cfg, "domain_train", &cfg.domain_train, base.vocab())?;
    let (model, mu) = if cfg.tune_mu {
        let eval = domain(cfg, "domain_eval", &cfg.domain_eval, base.vocab())?;
        base.finetune_tuned(&train, &eval)?
    } else {
        (base.finetune(&train, cfg.mu)?, cfg.mu)
    };
    ensure_out(cfg)?;
    model.save(cfg.out.join("finetuned.mctl"))?;
    Ok(render(
        &[("mu", json!(mu)), ("domain_sentences", json!(train.len()))],
        as_json,
    ))
}

fn cmd_build_tailor(cfg: &RunConfig, as_json: bool) -> CliResult<String> {
    let model = load_model(cfg, "finetuned.mctl", "finetune")?;
    let train = domain(cfg, "domain_train", &cfg.domain_train, model.vocab())?;
    let config = StackConfig {
        n_layers: cfg.layers,
        with_dual: cfg.dual,
        max_len: cfg.max_len,
        train: cfg.train_config(),
        sampler: cfg.sampler(),
    };
    let model: Arc<dyn LanguageModel> = Arc::new(model);
    let stack = build_stack(model, &train.sentences, &config)?;
    ensure_out(cfg)?;
    stack.save(cfg.out.join("stack"))?;
    let mut pairs = vec![("layers", json!(stack.layers.len()))];
    let accs: Vec<f64> = stack
        .layers
        .iter()
        .map(|l| l.ratio.report.heldout_accuracy)
        .collect();
    let rates: Vec<f64> = stack.layers.iter().map(|l| l.negative_acceptance).collect();
    pairs.push(("heldout_accuracy", json!(accs)));
    pairs.push(("negative_acceptance", json!(rates)));
    Ok(render(&pairs, as_json))
}

fn tailored(cfg: &RunConfig) -> CliResult<(TailoredDistribution, Vocab)> {
    let model = load_model(cfg, "finetuned.mctl", "finetune")?;
    let vocab = model.vocab().clone();
    let stack = load_tailor_stack(cfg)?;
    if matches!(cfg.algorithm, Algorithm::Smc | Algorithm::Ers) && !stack.has_duals() {
        return Err(CliError::Run(Error::Precondition(format!(
            "algorithm {} needs dual (prefix) estimators in every layer; rebuild the stack with dual = true or use algorithm = rs",
            cfg.algorithm
        ))));
    }
    let mut t = TailoredDistribution::new(Arc::new(model), stack, cfg.max_len);
    estimate_log_normalizer(&mut t, cfg.n_is, derive_seed(cfg.seed, 0x15), cfg.workers)?;
    Ok((t, vocab))
}

fn cmd_sample(cfg: &RunConfig, as_json: bool) -> CliResult<String> {
    let (t, vocab) = tailored(cfg)?;
    let seed = derive_seed(cfg.seed, 0x5a);
    let batch = match cfg.algorithm {
        Algorithm::Rs => rejection_sample(&t, cfg.n, seed, &cfg.sampler())?,
        Algorithm::Ers => ers_sample(&t, cfg.n, seed, &cfg.sampler())?,
        Algorithm::Smc => smc_sample(&t, cfg.n, seed)?,
    };
    ensure_out(cfg)?;
    let mut text = String::new();
    for s in &batch.accepted {
        text.push_str(&vocab.decode(s));
        text.push('\n');
    }
    write(&cfg.out.join("samples.txt"), &text)?;
    write(&cfg.out.join("stats.txt"), &batch.stats.to_kv())?;
    write(
        &cfg.out.join("stats.json"),
        &format!("{}\n", batch.stats.to_json()),
    )?;
    if batch.stats.budget_exhausted {
        return Err(CliError::Run(Error::Starvation(format!(
            "budget of {} proposals exhausted after {} of {} samples",
            cfg.budget,
            batch.accepted.len(),
            cfg.n
        ))));
    }
    Ok(if as_json {
        format!("{}\n", batch.stats.to_json())
    } else {
        batch.stats.to_kv()
    })
}

fn cmd_evaluate(cfg: &RunConfig, as_json: bool) -> CliResult<String> {
    let (t, vocab) = tailored(cfg)?;
    let test = domain(cfg, "domain_test", &cfg.domain_test, &vocab)?;
    let eval = EvalConfig {
        algorithm: cfg.algorithm,
        n_samples: cfg.n,
        seed: derive_seed(cfg.seed, 0x5a),
        sampler: cfg.sampler(),
        eval_lm: eval_lm_config(),
    };
    let (report, _) = evaluate(&t, &test, &vocab, &eval)?;
    ensure_out(cfg)?;
    write(&cfg.out.join("metrics.txt"), &report.to_table())?;
    write(
        &cfg.out.join("metrics.json"),
        &format!("{}\n", report.to_json()),
    )?;
    Ok(if as_json {
        format!("{}\n", report.to_json())
    } else {
        report.to_table()
    })
}

fn cmd_verify(cfg: &RunConfig, as_json: bool) -> CliResult<String> {
    let vc = VerifyConfig {
        seed: cfg.seed,
        n_samples: cfg.verify_samples,
        n_is: cfg.n_is.max(100_000),
        layers: cfg.verify_layers,
        workers: cfg.workers,
    };
    let report = run_enumerable_suite(&vc)?;
    ensure_out(cfg)?;
    write(&cfg.out.join("verify.txt"), &report.to_text())?;
    let out = if as_json {
        format!("{}\n", report.to_json())
    } else {
        report.to_text()
    };
    if report.passed() {
        Ok(out)
    } else {
        print!("{out}");
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        Err(CliError::Verify(failed.join(", ")))
    }
}

fn dispatch(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(&resolve(&c, false)?, c.json),
        Command::Finetune { common, tune_mu } => {
            cmd_finetune(&resolve(&common, tune_mu)?, common.json)
        }
        Command::BuildTailor(c) => cmd_build_tailor(&resolve(&c, false)?, c.json),
        Command::Sample(c) => cmd_sample(&resolve(&c, false)?, c.json),
        Command::Evaluate(c) => cmd_evaluate(&resolve(&c, false)?, c.json),
        Command::Verify(c) => cmd_verify(&resolve(&c, false)?, c.json),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
