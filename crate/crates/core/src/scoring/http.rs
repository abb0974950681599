//! HTTP teacher-forcing client, with an adapter for OpenAI-style
//! `echo + logprobs` completion servers.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use ureq::Agent;

use super::{BackendDescriptor, HttpProtocol, SpanRequest, SpanScorer, TokenLogProbs};
use crate::error::{Error, Result};
use crate::templating::PromptPlan;

/// Bearer token for the scoring endpoint. The value is never logged.
pub const AUTH_TOKEN_ENV: &str = "RMISEL_API_TOKEN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcingRequest {
    pub model: String,
    pub context: String,
    pub target: String,
    pub options: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherForcingResponse {
    pub target_tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub context_token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenAiCompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub echo: bool,
    pub logprobs: u32,
    pub temperature: f64,
    #[serde(flatten)]
    pub options: Map<String, Value>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Debug, Deserialize)]
struct CompletionLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

enum Attempt {
    Transient(String),
    Fatal(Error),
}

pub struct HttpScorer {
    agent: Agent,
    endpoint: String,
    protocol: HttpProtocol,
    max_retries: u32,
    backoff: Duration,
    token: Option<String>,
}

impl HttpScorer {
    pub fn new(descriptor: &BackendDescriptor) -> Result<Self> {
        let endpoint = descriptor
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("http backend without endpoint".into()))?;
        let config = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(descriptor.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(HttpScorer {
            agent: Agent::new_with_config(config),
            endpoint,
            protocol: descriptor.protocol,
            max_retries: descriptor.max_retries,
            backoff: Duration::from_millis(200),
            token: std::env::var(AUTH_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
        })
    }

    /// Base delay of the exponential backoff between retries.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn post<T: Serialize>(&self, body: &T, request_id: &str) -> std::result::Result<Value, Attempt> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .header("X-Request-Id", request_id);
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Transient(format!("transport: {e}")))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Transient(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(Error::Backend(format!(
                "{} answered HTTP {status}: {}",
                self.endpoint,
                detail.chars().take(200).collect::<String>()
            ))));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("unreadable response body: {e}"))))
    }

    fn post_with_retries<T: Serialize>(&self, body: &T, request_id: &str) -> Result<Value> {
        let mut attempt = 0u32;
        loop {
            match self.post(body, request_id) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(reason)) if attempt < self.max_retries => {
                    let delay = self.backoff * 2u32.saturating_pow(attempt);
                    log::warn!(
                        "{}: {reason}; retry {}/{} in {delay:?}",
                        self.endpoint,
                        attempt + 1,
                        self.max_retries
                    );
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(Attempt::Transient(reason)) => {
                    return Err(Error::Backend(format!(
                        "{} unreachable after {} attempts: {reason}",
                        self.endpoint,
                        attempt + 1
                    )))
                }
            }
        }
    }
}

impl SpanScorer for HttpScorer {
    fn score(&self, plan: &PromptPlan, request: &SpanRequest<'_>) -> Result<TokenLogProbs> {
        match self.protocol {
            HttpProtocol::TeacherForcing => {
                let body = TeacherForcingRequest {
                    model: request.model_id.to_owned(),
                    context: plan.context_text.clone(),
                    target: plan.target_text.clone(),
                    options: request.options.clone(),
                };
                let value = self.post_with_retries(&body, &request.request_id)?;
                let resp: TeacherForcingResponse = serde_json::from_value(value)
                    .map_err(|e| Error::Protocol(format!("malformed teacher-forcing response: {e}")))?;
                if resp.target_tokens.len() != resp.logprobs.len() {
                    return Err(Error::Protocol(format!(
                        "{} target tokens but {} logprobs",
                        resp.target_tokens.len(),
                        resp.logprobs.len()
                    )));
                }
                Ok(TokenLogProbs {
                    tokens: resp.target_tokens,
                    logprobs: resp.logprobs,
                    context_token_count: resp.context_token_count,
                })
            }
            HttpProtocol::OpenaiEcho => {
                let body = OpenAiCompletionRequest {
                    model: request.model_id.to_owned(),
                    prompt: format!("{}{}", plan.context_text, plan.target_text),
                    max_tokens: 1,
                    echo: true,
                    logprobs: 1,
                    temperature: 0.0,
                    options: request.options.clone(),
                };
                let value = self.post_with_retries(&body, &request.request_id)?;
                let resp: CompletionResponse = serde_json::from_value(value)
                    .map_err(|e| Error::Protocol(format!("malformed completion response: {e}")))?;
                let lp = resp
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.logprobs)
                    .ok_or_else(|| Error::Protocol("completion response without logprobs".into()))?;
                align_echo(
                    &plan.context_text,
                    &plan.target_text,
                    lp.tokens,
                    lp.token_logprobs,
                    lp.text_offset,
                )
            }
        }
    }
}

/// Cut the target span out of an echoed prompt. Fails when no token boundary
/// falls exactly at the end of the context or the span does not reproduce the
/// target text.
pub fn align_echo(
    context: &str,
    target: &str,
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
) -> Result<TokenLogProbs> {
    if tokens.len() != token_logprobs.len() || tokens.len() != text_offset.len() {
        return Err(Error::Protocol(
            "echo logprobs arrays have different lengths".into(),
        ));
    }
    let start_char = context.chars().count();
    let end_char = start_char + target.chars().count();
    let start = text_offset
        .iter()
        .position(|&o| o >= start_char)
        .filter(|&i| text_offset[i] == start_char)
        .ok_or_else(|| {
            Error::Protocol(format!(
                "span alignment mismatch: no token starts at the context boundary (char {start_char})"
            ))
        })?;
    let end = text_offset
        .iter()
        .position(|&o| o >= end_char)
        .unwrap_or(tokens.len());
    if end <= start {
        return Err(Error::Protocol("span alignment mismatch: empty target span".into()));
    }
    let joined: String = tokens[start..end].concat();
    if joined != target {
        return Err(Error::Protocol(format!(
            "span alignment mismatch: echoed target {joined:?} differs from {target:?}"
        )));
    }
    let logprobs = token_logprobs[start..end]
        .iter()
        .map(|lp| {
            lp.ok_or_else(|| {
                Error::Protocol("server returned no logprob for a target token".into())
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(TokenLogProbs {
        tokens: tokens[start..end].to_vec(),
        logprobs,
        context_token_count: start,
    })
}
