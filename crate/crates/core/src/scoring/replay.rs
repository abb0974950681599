//! Recorded log-probabilities played back by key.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SpanRequest, SpanScorer, TokenLogProbs};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::templating::{Direction, PromptPlan, TemplateVariant};

/// One replay line: `{"key": "...", "logprobs": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub key: String,
    pub logprobs: Vec<f64>,
}

/// `sample_id|model_id|variant|direction`, where `variant` is the template
/// the span was actually rendered with.
pub fn span_key(
    sample_id: &str,
    model_id: &str,
    variant: TemplateVariant,
    direction: Direction,
) -> String {
    format!("{sample_id}|{model_id}|{variant}|{direction}")
}

pub struct ReplayScorer {
    records: HashMap<String, Vec<f64>>,
}

impl ReplayScorer {
    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<ReplayRecord> = jsonl::read(path)?;
        Ok(Self::from_records(records))
    }

    pub fn from_records(records: impl IntoIterator<Item = ReplayRecord>) -> Self {
        ReplayScorer {
            records: records.into_iter().map(|r| (r.key, r.logprobs)).collect(),
        }
    }
}

impl SpanScorer for ReplayScorer {
    fn score(&self, plan: &PromptPlan, request: &SpanRequest<'_>) -> Result<TokenLogProbs> {
        let key = span_key(
            &plan.sample_id,
            request.model_id,
            plan.template_variant,
            plan.direction,
        );
        let logprobs = self
            .records
            .get(&key)
            .ok_or_else(|| Error::Backend(format!("no replay entry for `{key}`")))?;
        Ok(TokenLogProbs {
            tokens: Vec::new(),
            logprobs: logprobs.clone(),
            context_token_count: 0,
        })
    }
}
