//! Built-in offline scorer: an add-k smoothed bigram model over whitespace
//! tokens, optionally interpolated with a cache model over the teacher-forced
//! history (context plus already-scored target tokens).
//!
//! With both cache weights at zero this is the plain smoothed bigram. The
//! cache components let the answer in a PPL(Q|A) context influence every
//! query token, not only the first one.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{SpanRequest, SpanScorer, TokenLogProbs};
use crate::corpus::Tokenizer;
use crate::error::{Error, Result};
use crate::templating::PromptPlan;

const BOS: u32 = 0;
const UNK: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NgramConfig {
    /// Additive smoothing constant k (1 = add-one).
    pub smoothing: f64,
    /// Weight of the unigram cache over the history.
    pub cache_weight: f64,
    /// Weight of the bigram cache over the history.
    pub cache_bigram_weight: f64,
    /// Count each bigram type at most once per training sample.
    pub once_per_sample: bool,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig {
            smoothing: 1.0,
            cache_weight: 0.2,
            cache_bigram_weight: 0.4,
            once_per_sample: true,
        }
    }
}

impl NgramConfig {
    /// Pure add-one bigram, no history cache.
    pub fn plain() -> Self {
        NgramConfig {
            smoothing: 1.0,
            cache_weight: 0.0,
            cache_bigram_weight: 0.0,
            once_per_sample: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.cache_weight, self.cache_bigram_weight];
        if !(self.smoothing.is_finite() && self.smoothing >= 0.0)
            || w.iter().any(|x| !(x.is_finite() && *x >= 0.0))
            || w.iter().sum::<f64>() > 1.0
        {
            return Err(Error::Config(format!(
                "invalid n-gram config {self:?}: need smoothing ≥ 0, cache weights ≥ 0 summing to at most 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Debug, Clone)]
pub struct NgramModel {
    config: NgramConfig,
    vocab: HashMap<String, u32>,
    bigrams: HashMap<(u32, u32), u64>,
    /// Number of bigrams starting at each id.
    successors: Vec<u64>,
}

impl NgramModel {
    /// Train with every text as its own sample.
    pub fn train<'a>(config: NgramConfig, texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::train_samples(config, texts.into_iter().map(std::iter::once))
    }

    /// Train on groups of texts (typically a sample's query and answer).
    /// With `once_per_sample`, a bigram type counts at most once per group.
    pub fn train_samples<'a, G>(config: NgramConfig, samples: impl IntoIterator<Item = G>) -> Self
    where
        G: IntoIterator<Item = &'a str>,
    {
        let mut vocab: HashMap<String, u32> = HashMap::new();
        let mut bigrams = HashMap::new();
        let mut successors = vec![0u64; 2];
        let mut seen = HashSet::new();
        for group in samples {
            seen.clear();
            for text in group {
                let mut prev = BOS;
                for tok in text.split_whitespace() {
                    let next_id = vocab.len() as u32 + 2;
                    let id = *vocab.entry(tok.to_owned()).or_insert(next_id);
                    if id as usize == successors.len() {
                        successors.push(0);
                    }
                    if !config.once_per_sample || seen.insert((prev, id)) {
                        *bigrams.entry((prev, id)).or_insert(0) += 1;
                        successors[prev as usize] += 1;
                    }
                    prev = id;
                }
            }
        }
        NgramModel {
            config,
            vocab,
            bigrams,
            successors,
        }
    }

    pub fn config(&self) -> &NgramConfig {
        &self.config
    }

    /// Size of the outcome space: every training type plus the unknown token.
    pub fn outcome_count(&self) -> usize {
        self.vocab.len() + 1
    }

    fn id(&self, tok: &str) -> u32 {
        self.vocab.get(tok).copied().unwrap_or(UNK)
    }

    fn background(&self, prev: u32, next: u32) -> f64 {
        let k = self.config.smoothing;
        let count = self.bigrams.get(&(prev, next)).copied().unwrap_or(0) as f64;
        let total = self.successors.get(prev as usize).copied().unwrap_or(0) as f64;
        let denom = total + k * self.outcome_count() as f64;
        if denom == 0.0 {
            0.0
        } else {
            (count + k) / denom
        }
    }

    /// Teacher-forced natural-log probabilities of each target token.
    pub fn score(&self, context: &str, target: &str) -> TokenLogProbs {
        let ctx: Vec<u32> = context.split_whitespace().map(|t| self.id(t)).collect();
        let tokens: Vec<String> = target.split_whitespace().map(str::to_owned).collect();

        let mut history = History::default();
        for &id in &ctx {
            history.push(id);
        }
        let mut prev = ctx.last().copied().unwrap_or(BOS);
        let lambda_uni = self.config.cache_weight;
        let lambda_bi = self.config.cache_bigram_weight;
        let lambda_bg = 1.0 - lambda_uni - lambda_bi;

        let mut logprobs = Vec::with_capacity(tokens.len());
        for tok in &tokens {
            let id = self.id(tok);
            let bg = self.background(prev, id);
            // Each cache backs off to the next coarser estimate when it has
            // no evidence, so the mixture stays a proper distribution.
            let uni = if history.len > 0 { history.unigram(id) } else { bg };
            let bi = history.bigram(prev, id).unwrap_or(uni);
            let p = lambda_bg * bg + lambda_uni * uni + lambda_bi * bi;
            logprobs.push(p.ln());
            history.push(id);
            prev = id;
        }
        TokenLogProbs {
            tokens,
            logprobs,
            context_token_count: ctx.len(),
        }
    }
}

#[derive(Default)]
struct History {
    len: usize,
    last: Option<u32>,
    unigrams: HashMap<u32, u32>,
    bigrams: HashMap<(u32, u32), u32>,
    successors: HashMap<u32, u32>,
}

impl History {
    fn push(&mut self, id: u32) {
        *self.unigrams.entry(id).or_insert(0) += 1;
        if let Some(prev) = self.last {
            *self.bigrams.entry((prev, id)).or_insert(0) += 1;
            *self.successors.entry(prev).or_insert(0) += 1;
        }
        self.last = Some(id);
        self.len += 1;
    }

    fn unigram(&self, id: u32) -> f64 {
        self.unigrams.get(&id).copied().unwrap_or(0) as f64 / self.len as f64
    }

    fn bigram(&self, prev: u32, id: u32) -> Option<f64> {
        let total = self.successors.get(&prev).copied()?;
        let count = self.bigrams.get(&(prev, id)).copied().unwrap_or(0);
        Some(count as f64 / total as f64)
    }
}

pub struct NgramScorer {
    model: NgramModel,
}

impl NgramScorer {
    pub fn new(model: NgramModel) -> Self {
        NgramScorer { model }
    }

    pub fn model(&self) -> &NgramModel {
        &self.model
    }
}

impl SpanScorer for NgramScorer {
    fn score(&self, plan: &PromptPlan, _request: &SpanRequest<'_>) -> Result<TokenLogProbs> {
        let out = self.model.score(&plan.context_text, &plan.target_text);
        if out.tokens.is_empty() {
            return Err(Error::Precondition(format!(
                "target for `{}` has no whitespace tokens",
                plan.sample_id
            )));
        }
        Ok(out)
    }

    fn tokenizer(&self) -> Option<&dyn Tokenizer> {
        Some(&WhitespaceTokenizer)
    }
}
