//! Per-token log-probabilities, perplexity, RMI and IFD.

#[cfg(feature = "http")]
mod http;
mod ngram;
mod replay;

#[cfg(feature = "http")]
pub use http::{
    HttpScorer, OpenAiCompletionRequest, TeacherForcingRequest, TeacherForcingResponse,
    AUTH_TOKEN_ENV,
};
pub use ngram::{NgramConfig, NgramModel, NgramScorer, WhitespaceTokenizer};
pub use replay::{span_key, ReplayRecord, ReplayScorer};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::corpus::{CacheKey, Corpus, Normalization, Sample, ScoreCache, ScoreCacheEntry, Tokenizer};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::templating::{Direction, PromptPlan, TemplateLibrary, TemplateVariant, DEFAULT_FAMILY};

/// Log-probabilities (natural log) of a target span under its context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    /// Target tokens as echoed by the backend; empty when it does not echo.
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub context_token_count: usize,
}

impl TokenLogProbs {
    pub fn token_count(&self) -> usize {
        self.logprobs.len()
    }
}

/// exp(−mean(logprobs)), with a compensated sum over the N target tokens.
pub fn perplexity(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Precondition("perplexity of an empty span".into()));
    }
    if let Some(bad) = logprobs.iter().find(|lp| !lp.is_finite()) {
        return Err(Error::Validation(format!("non-finite logprob {bad}")));
    }
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in logprobs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    let mean = (sum + comp) / logprobs.len() as f64;
    Ok((-mean).exp())
}

fn check_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::Precondition(format!(
            "{name} must be finite and positive, got {value}"
        )))
    }
}

/// RMI = ln PPL(Q) − ln PPL(Q|A). Negative values are legitimate.
pub fn rmi(ppl_q: f64, ppl_q_given_a: f64) -> Result<f64> {
    check_positive("ppl_q", ppl_q)?;
    check_positive("ppl_q_given_a", ppl_q_given_a)?;
    Ok(ppl_q.ln() - ppl_q_given_a.ln())
}

/// IFD = PPL(A|Q) / PPL(A). Values above 1 mean the query hinders the answer.
pub fn ifd(ppl_a_given_q: f64, ppl_a: f64) -> Result<f64> {
    check_positive("ppl_a_given_q", ppl_a_given_q)?;
    check_positive("ppl_a", ppl_a)?;
    Ok(ppl_a_given_q / ppl_a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreStatus {
    Ok,
    Partial,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub model_id: String,
    pub template_variant: TemplateVariant,
    pub ppl_q: Option<f64>,
    pub ppl_q_given_a: Option<f64>,
    pub ppl_a: Option<f64>,
    pub ppl_a_given_q: Option<f64>,
    pub rmi: Option<f64>,
    pub ifd: Option<f64>,
    /// IFD above 1: conditioning on the query makes the answer harder.
    #[serde(default)]
    pub ifd_hinders: bool,
    pub status: ScoreStatus,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<Direction, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_tokens: Option<usize>,
}

impl ScoreRecord {
    /// Usable for stratified ranking.
    pub fn is_rankable(&self) -> bool {
        self.ppl_q.is_some() && self.rmi.is_some()
    }

    pub fn get(&self, direction: Direction) -> Option<f64> {
        match direction {
            Direction::QUnconditional => self.ppl_q,
            Direction::QGivenA => self.ppl_q_given_a,
            Direction::AUnconditional => self.ppl_a,
            Direction::AGivenQ => self.ppl_a_given_q,
        }
    }

    fn from_entry(
        entry: &ScoreCacheEntry,
        directions: &[Direction],
        failures: BTreeMap<Direction, String>,
    ) -> Self {
        let pick = |d: Direction| {
            if directions.contains(&d) {
                entry.get(d)
            } else {
                None
            }
        };
        let ppl_q = pick(Direction::QUnconditional);
        let ppl_q_given_a = pick(Direction::QGivenA);
        let ppl_a = pick(Direction::AUnconditional);
        let ppl_a_given_q = pick(Direction::AGivenQ);
        let rmi = match (ppl_q, ppl_q_given_a) {
            (Some(q), Some(qa)) => rmi(q, qa).ok(),
            _ => None,
        };
        let ifd = match (ppl_a_given_q, ppl_a) {
            (Some(aq), Some(a)) => ifd(aq, a).ok(),
            _ => None,
        };
        let scored = directions.iter().filter(|&&d| pick(d).is_some()).count();
        let status = if scored == directions.len() {
            ScoreStatus::Ok
        } else if scored == 0 {
            ScoreStatus::Failed
        } else {
            ScoreStatus::Partial
        };
        ScoreRecord {
            sample_id: entry.sample_id.clone(),
            model_id: entry.model_id.clone(),
            template_variant: entry.template_variant,
            ppl_q,
            ppl_q_given_a,
            ppl_a,
            ppl_a_given_q,
            rmi,
            ifd,
            ifd_hinders: ifd.is_some_and(|v| v > 1.0),
            status,
            failures,
            query_tokens: entry.query_tokens,
            answer_tokens: entry.answer_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpTeacherForcing,
    ReplayFile,
    BuiltinNgram,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HttpProtocol {
    /// `{model, context, target, options}` → `{target_tokens, logprobs, context_token_count}`
    #[default]
    TeacherForcing,
    /// OpenAI-style `/v1/completions` with `echo` and `logprobs`.
    OpenaiEcho,
}

fn default_family() -> String {
    DEFAULT_FAMILY.to_owned()
}
fn default_true() -> bool {
    true
}
fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub model_id: String,
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub protocol: HttpProtocol,
    /// Replay file for `replay_file` backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub ngram: NgramConfig,
    #[serde(default = "default_family")]
    pub family: String,
    #[serde(default = "default_true")]
    pub normalized_probs: bool,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub request_options: Map<String, Value>,
}

impl BackendDescriptor {
    pub fn builtin(model_id: impl Into<String>, ngram: NgramConfig) -> Self {
        BackendDescriptor {
            model_id: model_id.into(),
            kind: BackendKind::BuiltinNgram,
            endpoint: None,
            protocol: HttpProtocol::default(),
            path: None,
            ngram,
            family: default_family(),
            normalized_probs: true,
            max_in_flight: default_in_flight(),
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            request_options: Map::new(),
        }
    }

    /// Parse a standalone descriptor file (TOML, or JSON by extension).
    /// A relative replay path is resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut desc: BackendDescriptor = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        if let (Some(p), Some(base)) = (desc.path.take(), path.parent()) {
            desc.path = Some(if p.is_relative() { base.join(p) } else { p });
        }
        Ok(desc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_id.trim().is_empty() {
            return Err(Error::Config("backend model_id is empty".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config(format!(
                "backend `{}`: max_in_flight must be at least 1",
                self.model_id
            )));
        }
        match self.kind {
            BackendKind::HttpTeacherForcing if self.endpoint.is_none() => Err(Error::Config(
                format!("backend `{}` needs an endpoint", self.model_id),
            )),
            BackendKind::ReplayFile if self.path.is_none() => Err(Error::Config(format!(
                "backend `{}` needs a replay file path",
                self.model_id
            ))),
            BackendKind::BuiltinNgram => self.ngram.validate(),
            _ => Ok(()),
        }
    }
}

/// Source of per-token log-probabilities for a rendered plan.
pub trait SpanScorer: Send + Sync {
    fn score(&self, plan: &PromptPlan, request: &SpanRequest<'_>) -> Result<TokenLogProbs>;

    /// The scoring model's tokenizer, when it can be run locally.
    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        None
    }
}

/// Per-request metadata handed to a [`SpanScorer`].
pub struct SpanRequest<'a> {
    pub model_id: &'a str,
    /// Deterministic id derived from the cache key and direction, so retries
    /// are idempotent on the server side.
    pub request_id: String,
    pub options: &'a Map<String, Value>,
}

/// A configured scoring model: descriptor, scorer and call accounting.
pub struct Backend {
    descriptor: BackendDescriptor,
    scorer: Box<dyn SpanScorer>,
    options: Map<String, Value>,
    calls: AtomicUsize,
}

impl Backend {
    /// Build the backend described by `descriptor`. Built-in n-gram models are
    /// trained on `corpus`; `library` supplies the family's request options.
    pub fn open(
        descriptor: BackendDescriptor,
        corpus: Option<&Corpus>,
        library: &TemplateLibrary,
    ) -> Result<Self> {
        descriptor.validate()?;
        let family = library.family(&descriptor.family)?;
        let scorer: Box<dyn SpanScorer> = match descriptor.kind {
            BackendKind::BuiltinNgram => {
                let corpus = corpus.ok_or_else(|| {
                    Error::Config("the builtin n-gram backend needs a training corpus".into())
                })?;
                Box::new(NgramScorer::new(NgramModel::train_samples(
                    descriptor.ngram.clone(),
                    corpus
                        .samples
                        .iter()
                        .map(|s| [s.query.as_str(), s.answer.as_str()]),
                )))
            }
            BackendKind::ReplayFile => {
                let path = descriptor.path.as_deref().expect("validated");
                Box::new(ReplayScorer::load(path)?)
            }
            BackendKind::HttpTeacherForcing => open_http(&descriptor)?,
        };
        let mut options = family.backend_options();
        options.extend(descriptor.request_options.clone());
        Ok(Backend {
            descriptor,
            scorer,
            options,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn with_scorer(descriptor: BackendDescriptor, scorer: Box<dyn SpanScorer>) -> Self {
        let options = descriptor.request_options.clone();
        Backend {
            descriptor,
            scorer,
            options,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    pub fn model_id(&self) -> &str {
        &self.descriptor.model_id
    }

    pub fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        self.scorer.tokenizer()
    }

    /// Number of span requests issued so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

#[cfg(feature = "http")]
fn open_http(descriptor: &BackendDescriptor) -> Result<Box<dyn SpanScorer>> {
    Ok(Box::new(HttpScorer::new(descriptor)?))
}

#[cfg(not(feature = "http"))]
fn open_http(descriptor: &BackendDescriptor) -> Result<Box<dyn SpanScorer>> {
    Err(Error::Config(format!(
        "backend `{}`: built without HTTP support",
        descriptor.model_id
    )))
}

fn request_id(model_id: &str, plan: &PromptPlan, run_variant: TemplateVariant) -> String {
    let key = CacheKey::new(&plan.sample_id, model_id, run_variant).to_key_string();
    sha256_hex(format!("{key}|{}", plan.direction).as_bytes())[..32].to_owned()
}

/// Score one plan's target span.
pub fn score_span(plan: &PromptPlan, backend: &Backend) -> Result<TokenLogProbs> {
    score_span_for(plan, backend, plan.template_variant)
}

fn score_span_for(
    plan: &PromptPlan,
    backend: &Backend,
    run_variant: TemplateVariant,
) -> Result<TokenLogProbs> {
    if plan.target_text.is_empty() {
        return Err(Error::Precondition(format!(
            "empty target span for `{}`",
            plan.sample_id
        )));
    }
    let request = SpanRequest {
        model_id: backend.model_id(),
        request_id: request_id(backend.model_id(), plan, run_variant),
        options: &backend.options,
    };
    backend.calls.fetch_add(1, Ordering::Relaxed);
    let out = backend.scorer.score(plan, &request)?;
    if out.logprobs.is_empty() {
        return Err(Error::Protocol(format!(
            "backend returned no logprobs for `{}` ({})",
            plan.sample_id, plan.direction
        )));
    }
    if !out.tokens.is_empty() && out.tokens.len() != out.logprobs.len() {
        return Err(Error::Protocol(format!(
            "backend returned {} logprobs for {} target tokens",
            out.logprobs.len(),
            out.tokens.len()
        )));
    }
    if backend.descriptor.normalized_probs {
        if let Some(bad) = out.logprobs.iter().find(|&&lp| lp > 0.0) {
            return Err(Error::Protocol(format!(
                "positive logprob {bad} from a backend declaring normalized probabilities"
            )));
        }
    }
    Ok(out)
}

/// Shared state for scoring a corpus.
pub struct ScoringContext<'a> {
    pub library: &'a TemplateLibrary,
    pub cache: &'a ScoreCache,
}

/// Score the requested directions of one sample, consulting the cache first.
/// Failures are recorded on the returned record, never raised.
pub fn score_sample(
    sample: &Sample,
    backend: &Backend,
    ctx: &ScoringContext<'_>,
    variant: TemplateVariant,
    directions: &[Direction],
) -> ScoreRecord {
    let key = CacheKey::new(&sample.id, backend.model_id(), variant);
    let mut entry = ctx
        .cache
        .get(&key)
        .unwrap_or_else(|| ScoreCacheEntry::empty(&key));
    let mut failures = BTreeMap::new();
    let mut fresh = false;
    for &direction in directions {
        if entry.get(direction).is_some() {
            continue;
        }
        let scored = ctx
            .library
            .plan(sample, variant.for_direction(direction), &backend.descriptor.family, direction)
            .and_then(|plan| score_span_for(&plan, backend, variant))
            .and_then(|lp| Ok((perplexity(&lp.logprobs)?, lp.token_count())));
        match scored {
            Ok((ppl, n)) => {
                entry.set(direction, ppl);
                if direction.scores_query() {
                    entry.query_tokens = Some(n);
                } else {
                    entry.answer_tokens = Some(n);
                }
                fresh = true;
            }
            Err(e) => {
                log::debug!("{} {} {direction}: {e}", backend.model_id(), sample.id);
                failures.insert(direction, e.to_string());
            }
        }
    }
    if fresh {
        let norm = Normalization::from_flag(backend.descriptor.normalized_probs);
        if let Err(e) = ctx.cache.put(entry.clone(), norm) {
            log::error!("cache write for `{}` failed: {e}", sample.id);
        }
    }
    ScoreRecord::from_entry(&entry, directions, failures)
}

/// Score every sample with up to `workers` concurrent requests. The output
/// is in input order and independent of scheduling.
pub fn score_corpus(
    samples: &[Sample],
    backend: &Backend,
    ctx: &ScoringContext<'_>,
    variant: TemplateVariant,
    directions: &[Direction],
    workers: usize,
) -> Vec<ScoreRecord> {
    let workers = workers.clamp(1, samples.len().max(1));
    if workers == 1 {
        return samples
            .iter()
            .map(|s| score_sample(s, backend, ctx, variant, directions))
            .collect();
    }
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<(usize, ScoreRecord)>> = Mutex::new(Vec::with_capacity(samples.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                let record = score_sample(sample, backend, ctx, variant, directions);
                done.lock().expect("result lock poisoned").push((i, record));
            });
        }
    });
    let mut done = done.into_inner().expect("result lock poisoned");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, r)| r).collect()
}
