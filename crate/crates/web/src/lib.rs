//! Browser bindings: render prompt plans, score one Q/A pair with the
//! built-in n-gram model, and explore a generated defect corpus.
//!
//! Every export takes plain values and returns a JSON string.

use rmisel_core::corpus::{Corpus, Sample, ScoreCache};
use rmisel_core::defectlab::{self, DefectMode, DefectSpec};
use rmisel_core::ranking::rank;
use rmisel_core::scoring::{
    score_corpus, score_sample, Backend, BackendDescriptor, NgramConfig, ScoreRecord, ScoringContext,
};
use rmisel_core::templating::{Direction, TemplateLibrary, TemplateVariant};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct PlanView {
    direction: Direction,
    template_variant: TemplateVariant,
    context: String,
    target: String,
    suffix: String,
}

#[derive(Serialize)]
struct PlanError {
    direction: Direction,
    error: String,
}

#[derive(Serialize)]
struct Plans {
    family: String,
    variant: TemplateVariant,
    plans: Vec<PlanView>,
    unsupported: Vec<PlanError>,
}

/// Plans for all four directions of one sample under `variant`.
pub fn plans(query: &str, answer: &str, family: &str, variant: &str) -> Result<String, String> {
    let lib = TemplateLibrary::builtin();
    let variant: TemplateVariant = variant.parse().map_err(|e: rmisel_core::Error| e.to_string())?;
    lib.family(family).map_err(|e| e.to_string())?;
    let sample = Sample::new("demo", query, answer);
    let mut out = Plans {
        family: family.to_owned(),
        variant,
        plans: vec![],
        unsupported: vec![],
    };
    for d in Direction::ALL {
        let v = variant.for_direction(d);
        match lib.plan(&sample, v, family, d) {
            Ok(p) => out.plans.push(PlanView {
                direction: d,
                template_variant: p.template_variant,
                context: p.context_text,
                target: p.target_text,
                suffix: p.suffix_text,
            }),
            Err(e) => out.unsupported.push(PlanError {
                direction: d,
                error: e.to_string(),
            }),
        }
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

fn demo_corpus(seed: u64, n: usize) -> Result<defectlab::GeneratedCorpus, String> {
    let spec = DefectSpec::uniform(
        &[DefectMode::Clean, DefectMode::KeywordEcho, DefectMode::Misalignment],
        seed,
    );
    defectlab::generate_corpus(&spec, n).map_err(|e| e.to_string())
}

fn ngram_backend(samples: &[Sample], cache_weight: f64, cache_bigram_weight: f64) -> Result<Backend, String> {
    let cfg = NgramConfig {
        cache_weight,
        cache_bigram_weight,
        ..NgramConfig::default()
    };
    let corpus = Corpus {
        samples: samples.to_vec(),
        source_digest: String::new(),
    };
    Backend::open(
        BackendDescriptor::builtin("ngram", cfg),
        Some(&corpus),
        &TemplateLibrary::builtin(),
    )
    .map_err(|e| e.to_string())
}

/// Score one pair with an n-gram model trained on a seeded defect corpus
/// plus the pair itself.
pub fn score(
    query: &str,
    answer: &str,
    seed: u64,
    cache_weight: f64,
    cache_bigram_weight: f64,
) -> Result<String, String> {
    let mut samples = demo_corpus(seed, 300)?.samples;
    let pair = Sample::new("demo", query, answer);
    samples.push(pair.clone());
    let backend = ngram_backend(&samples, cache_weight, cache_bigram_weight)?;
    let lib = TemplateLibrary::builtin();
    let cache = ScoreCache::in_memory();
    let ctx = ScoringContext {
        library: &lib,
        cache: &cache,
    };
    let rec = score_sample(&pair, &backend, &ctx, TemplateVariant::Standard, &Direction::ALL);
    serde_json::to_string(&rec).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Point {
    id: String,
    mode: DefectMode,
    query: String,
    answer: String,
    ln_ppl_q: f64,
    rmi: f64,
    bin: usize,
    normalized_rank: f64,
}

#[derive(Serialize)]
struct Exploration {
    points: Vec<Point>,
    separation: defectlab::SeparationReport,
}

/// Generate, score and rank a defect corpus; return per-sample points and
/// the per-mode separation summary.
pub fn explore(n: usize, seed: u64, k: usize) -> Result<String, String> {
    let generated = demo_corpus(seed, n)?;
    let backend = ngram_backend(&generated.samples, 0.2, 0.4)?;
    let lib = TemplateLibrary::builtin();
    let cache = ScoreCache::in_memory();
    let ctx = ScoringContext {
        library: &lib,
        cache: &cache,
    };
    let scores: Vec<ScoreRecord> = score_corpus(
        &generated.samples,
        &backend,
        &ctx,
        TemplateVariant::Standard,
        &[Direction::QUnconditional, Direction::QGivenA],
        1,
    );
    let (ranks, _) = rank(&scores, k).map_err(|e| e.to_string())?;
    let separation =
        defectlab::separation_metrics(&scores, &generated.labels, k).map_err(|e| e.to_string())?;
    let by_id: std::collections::HashMap<&str, (&Sample, DefectMode)> = generated
        .samples
        .iter()
        .zip(&generated.labels)
        .map(|(s, l)| (s.id.as_str(), (s, l.mode)))
        .collect();
    let points = ranks
        .iter()
        .map(|r| {
            let (s, mode) = by_id[r.sample_id.as_str()];
            Point {
                id: r.sample_id.clone(),
                mode,
                query: s.query.clone(),
                answer: s.answer.clone(),
                ln_ppl_q: r.ppl_q.ln(),
                rmi: r.rmi,
                bin: r.bin,
                normalized_rank: r.normalized_rank,
            }
        })
        .collect();
    serde_json::to_string(&Exploration { points, separation }).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn render_plans(query: &str, answer: &str, family: &str, variant: &str) -> Result<String, JsError> {
    plans(query, answer, family, variant).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn score_pair(
    query: &str,
    answer: &str,
    seed: u32,
    cache_weight: f64,
    cache_bigram_weight: f64,
) -> Result<String, JsError> {
    score(query, answer, seed as u64, cache_weight, cache_bigram_weight).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn explore_defects(n: u32, seed: u32, k: u32) -> Result<String, JsError> {
    explore(n as usize, seed as u64, k as usize).map_err(|e| JsError::new(&e))
}
