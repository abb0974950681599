//! Corpus ingest, token-length filtering and the score cache.

mod cache;

pub use cache::{CacheKey, Normalization, ScoreCache, ScoreCacheEntry};

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::jsonl;

/// One (query, answer) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub query: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_tokens: Option<usize>,
    /// Unknown input fields, carried through untouched.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Sample {
    pub fn new(id: impl Into<String>, query: impl Into<String>, answer: impl Into<String>) -> Self {
        Sample {
            id: id.into(),
            query: query.into(),
            answer: answer.into(),
            query_tokens: None,
            answer_tokens: None,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    /// SHA-256 of the input bytes.
    pub source_digest: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.samples
            .iter()
            .flat_map(|s| [s.query.as_str(), s.answer.as_str()])
    }
}

/// Counts tokens the way the scoring model does.
pub trait Tokenizer: Send + Sync {
    fn count_tokens(&self, text: &str) -> usize;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthMode {
    /// query_tokens + answer_tokens ≤ max_tokens
    #[default]
    Joint,
    /// query_tokens ≤ max_tokens and answer_tokens ≤ max_tokens
    Separate,
}

impl LengthMode {
    pub fn admits(self, query_tokens: usize, answer_tokens: usize, max_tokens: usize) -> bool {
        match self {
            LengthMode::Joint => query_tokens + answer_tokens <= max_tokens,
            LengthMode::Separate => query_tokens <= max_tokens && answer_tokens <= max_tokens,
        }
    }
}

pub struct LoadOptions<'a> {
    pub max_tokens: usize,
    pub length_mode: LengthMode,
    pub tokenizer: Option<&'a dyn Tokenizer>,
}

impl Default for LoadOptions<'_> {
    fn default() -> Self {
        LoadOptions {
            max_tokens: 2048,
            length_mode: LengthMode::Joint,
            tokenizer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based input line; 0 for rejections made after loading.
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub kept: usize,
    pub dropped_length: usize,
    pub dropped_malformed: usize,
    /// Kept samples whose length check waits for scoring (no tokenizer at load time).
    pub deferred: usize,
    pub rejections: Vec<Rejection>,
}

#[derive(Deserialize)]
struct RawRecord {
    #[serde(default)]
    id: Option<Value>,
    #[serde(default)]
    query: Option<Value>,
    #[serde(default)]
    answer: Option<Value>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

pub fn load_corpus(path: &Path, opts: &LoadOptions<'_>) -> Result<(Corpus, LoadReport)> {
    let bytes = jsonl::read_bytes(path)?;
    Ok(parse_corpus(&bytes, opts))
}

/// Parse a corpus from bytes. Record-level problems never fail the load;
/// they are collected in the report.
pub fn parse_corpus(bytes: &[u8], opts: &LoadOptions<'_>) -> (Corpus, LoadReport) {
    let source_digest = sha256_hex(bytes);
    let mut report = LoadReport::default();
    let mut samples = Vec::new();
    let mut seen = HashSet::new();

    // Split on raw newlines so one bad UTF-8 line only rejects that line.
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }

    for (idx, raw) in lines.into_iter().enumerate() {
        let line_no = idx + 1;
        let mut reject = |reason: String| {
            log::warn!("corpus line {line_no} rejected: {reason}");
            report.dropped_malformed += 1;
            report.rejections.push(Rejection {
                line: line_no,
                id: None,
                reason,
            });
        };
        let Ok(line) = std::str::from_utf8(raw) else {
            reject("line is not valid UTF-8".into());
            continue;
        };
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                reject(format!("invalid JSON object: {e}"));
                continue;
            }
        };
        let id = match record.id {
            None | Some(Value::Null) => format!("line-{line_no}"),
            Some(Value::String(s)) if !s.is_empty() => s,
            Some(_) => {
                reject("field `id` must be a non-empty string".into());
                continue;
            }
        };
        let query = match text_field(record.query, "query") {
            Ok(q) => q,
            Err(reason) => {
                reject(reason);
                continue;
            }
        };
        let answer = match text_field(record.answer, "answer") {
            Ok(a) => a,
            Err(reason) => {
                reject(reason);
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            reject(format!("duplicate id `{id}`"));
            continue;
        }

        let mut sample = Sample {
            id,
            query,
            answer,
            query_tokens: None,
            answer_tokens: None,
            extra: record.extra,
        };
        match opts.tokenizer {
            Some(tok) => {
                let q = tok.count_tokens(&sample.query);
                let a = tok.count_tokens(&sample.answer);
                sample.query_tokens = Some(q);
                sample.answer_tokens = Some(a);
                if !opts.length_mode.admits(q, a, opts.max_tokens) {
                    report.dropped_length += 1;
                    report.rejections.push(Rejection {
                        line: line_no,
                        id: Some(sample.id.clone()),
                        reason: format!(
                            "too long: {q} query + {a} answer tokens exceeds {} ({:?})",
                            opts.max_tokens, opts.length_mode
                        ),
                    });
                    continue;
                }
            }
            None => report.deferred += 1,
        }
        samples.push(sample);
    }
    report.kept = samples.len();
    (
        Corpus {
            samples,
            source_digest,
        },
        report,
    )
}

/// Apply a deferred length check with a tokenizer that became available
/// after loading (a backend's). Samples that already carry counts are
/// re-checked without recounting.
pub fn apply_length_filter(
    corpus: &mut Corpus,
    report: &mut LoadReport,
    tokenizer: &dyn Tokenizer,
    max_tokens: usize,
    mode: LengthMode,
) {
    let before = corpus.samples.len();
    let mut kept = Vec::with_capacity(before);
    for mut sample in std::mem::take(&mut corpus.samples) {
        let was_deferred = sample.query_tokens.is_none() || sample.answer_tokens.is_none();
        let q = *sample
            .query_tokens
            .get_or_insert_with(|| tokenizer.count_tokens(&sample.query));
        let a = *sample
            .answer_tokens
            .get_or_insert_with(|| tokenizer.count_tokens(&sample.answer));
        if was_deferred {
            report.deferred = report.deferred.saturating_sub(1);
        }
        if mode.admits(q, a, max_tokens) {
            kept.push(sample);
        } else {
            report.dropped_length += 1;
            report.rejections.push(Rejection {
                line: 0,
                id: Some(sample.id.clone()),
                reason: format!(
                    "too long: {q} query + {a} answer tokens exceeds {max_tokens} ({mode:?})"
                ),
            });
        }
    }
    corpus.samples = kept;
    report.kept = corpus.samples.len();
}

fn text_field(value: Option<Value>, name: &str) -> std::result::Result<String, String> {
    match value {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s),
        Some(Value::String(_)) => Err(format!("field `{name}` is empty")),
        None | Some(Value::Null) => Err(format!("missing field `{name}`")),
        Some(_) => Err(format!("field `{name}` must be a string")),
    }
}

#[derive(Serialize)]
struct OutRecord<'a> {
    id: &'a str,
    query: &'a str,
    answer: &'a str,
    #[serde(flatten)]
    extra: &'a Map<String, Value>,
}

/// Serialize samples in the input corpus format (token counts are not written).
pub fn corpus_to_bytes(samples: &[Sample]) -> Result<Vec<u8>> {
    let records: Vec<OutRecord<'_>> = samples
        .iter()
        .map(|s| OutRecord {
            id: &s.id,
            query: &s.query,
            answer: &s.answer,
            extra: &s.extra,
        })
        .collect();
    jsonl::to_bytes(&records)
}

pub fn write_corpus(path: &Path, samples: &[Sample]) -> Result<()> {
    jsonl::write_atomic(path, &corpus_to_bytes(samples)?)
}

pub(crate) fn check_unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Validation(format!("duplicate sample id `{id}`")));
        }
    }
    Ok(())
}
