//! End-to-end runs, plus the stage functions the CLI uses so that chaining
//! subcommands writes the same bytes as a full run.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisInputs};
use crate::corpus::{self, Corpus, LengthMode, LoadOptions, LoadReport, Rejection, ScoreCache};
use crate::defectlab;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::ranking::select::{ids_to_bytes, manifest_path_for};
use crate::ranking::{
    self, pair_ranks, select, PairedRanks, RankRecord, Selection, SelectionInputs,
    SelectionManifest, SelectionSpec, Strategy, DEFAULT_K,
};
use crate::scoring::{score_corpus, Backend, BackendDescriptor, ScoreRecord, ScoreStatus, ScoringContext};
use crate::templating::{Direction, TemplateLibrary, TemplateVariant};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RUN_STATS_FILE: &str = "run_stats.json";
pub const LOAD_REPORT_FILE: &str = "load_report.json";
pub const PAIRED_FILE: &str = "paired.jsonl";
pub const SEPARATION_FILE: &str = "separation.json";

pub fn scores_file(role: &str, variant: Option<TemplateVariant>) -> String {
    match variant {
        Some(v) => format!("scores.{role}.{v}.jsonl"),
        None => format!("scores.{role}.jsonl"),
    }
}

pub fn ranks_file(role: &str) -> String {
    format!("ranks.{role}.jsonl")
}

pub fn selection_file(name: &str) -> String {
    format!("selection.{name}.txt")
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_max_tokens() -> usize {
    2048
}
fn all_directions() -> Vec<Direction> {
    Direction::ALL.to_vec()
}
fn standard() -> TemplateVariant {
    TemplateVariant::Standard
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSelection {
    pub name: String,
    #[serde(flatten)]
    pub spec: SelectionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
    #[serde(default = "standard")]
    pub variant: TemplateVariant,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub length_mode: LengthMode,
    #[serde(default = "all_directions")]
    pub directions: Vec<Direction>,
    /// Extra family template files, merged over the built-in ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// Defect labels; adds `separation.json` to the outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Variants to score the strong model under, for template sensitivity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensitivity_variants: Vec<TemplateVariant>,
    pub strong: BackendDescriptor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weak: Option<BackendDescriptor>,
    #[serde(default, rename = "selection", skip_serializing_if = "Vec::is_empty")]
    pub selections: Vec<NamedSelection>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Parse TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.strong.validate()?;
        if let Some(weak) = &self.weak {
            weak.validate()?;
            if weak.model_id == self.strong.model_id {
                return Err(Error::Config(format!(
                    "strong and weak backends share model_id `{}`",
                    weak.model_id
                )));
            }
        }
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::Config("max_tokens must be at least 1".into()));
        }
        for needed in [Direction::QUnconditional, Direction::QGivenA] {
            if !self.directions.contains(&needed) {
                return Err(Error::Config(format!("directions must include `{needed}` to compute RMI")));
            }
        }
        let mut names = HashSet::new();
        for sel in &self.selections {
            let ok_name = !sel.name.is_empty()
                && sel.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok_name {
                return Err(Error::Config(format!(
                    "selection name `{}` must be non-empty ASCII letters, digits, `-` or `_`",
                    sel.name
                )));
            }
            if !names.insert(&sel.name) {
                return Err(Error::Config(format!("duplicate selection name `{}`", sel.name)));
            }
            sel.spec.validate()?;
            if sel.spec.strategy.needs_pairs() && self.weak.is_none() {
                return Err(Error::Config(format!(
                    "selection `{}` ({}) needs a weak backend",
                    sel.name, sel.spec.strategy
                )));
            }
            if sel.spec.strategy == Strategy::IfdClosestToOne
                && !(self.directions.contains(&Direction::AUnconditional)
                    && self.directions.contains(&Direction::AGivenQ))
            {
                return Err(Error::Config(format!(
                    "selection `{}` needs directions `a` and `a_given_q`",
                    sel.name
                )));
            }
        }
        let mut seen = HashSet::new();
        for v in &self.sensitivity_variants {
            if *v == self.variant || !seen.insert(v) {
                return Err(Error::Config(format!("sensitivity variant `{v}` is repeated")));
            }
        }
        Ok(())
    }

    pub fn library(&self) -> Result<TemplateLibrary> {
        match &self.templates_dir {
            Some(dir) => TemplateLibrary::with_dir(&self.resolve(dir)),
            None => Ok(TemplateLibrary::builtin()),
        }
    }

    /// Descriptor with its replay path resolved against the config directory.
    pub fn resolved_backend(&self, desc: &BackendDescriptor) -> BackendDescriptor {
        let mut desc = desc.clone();
        desc.path = desc.path.map(|p| self.resolve(&p));
        desc
    }
}

/// Settings that may differ between runs without changing any artifact.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Concurrent scoring requests; defaults to each backend's `max_in_flight`.
    pub workers: Option<usize>,
}

pub struct ScoreJob<'a> {
    pub library: &'a TemplateLibrary,
    pub cache: &'a ScoreCache,
    pub variant: TemplateVariant,
    pub directions: &'a [Direction],
    pub workers: Option<usize>,
    pub max_tokens: usize,
    pub length_mode: LengthMode,
}

pub struct ScoreOutput {
    pub records: Vec<ScoreRecord>,
    pub backend_calls: usize,
}

fn admitted_after_scoring(r: &ScoreRecord, max: usize, mode: LengthMode) -> bool {
    match (r.query_tokens, r.answer_tokens) {
        (Some(q), Some(a)) => mode.admits(q, a, max),
        (Some(n), None) | (None, Some(n)) => n <= max,
        (None, None) => true,
    }
}

/// Score `corpus` with `backend`, settling deferred length checks on the way:
/// with a local tokenizer before scoring, otherwise from the token counts the
/// backend reports. Dropped samples leave `corpus` and are added to `report`.
pub fn score_stage(
    corpus: &mut Corpus,
    report: &mut LoadReport,
    backend: &Backend,
    job: &ScoreJob<'_>,
) -> ScoreOutput {
    if let Some(tok) = backend.tokenizer() {
        corpus::apply_length_filter(corpus, report, tok, job.max_tokens, job.length_mode);
    }
    let calls_before = backend.calls();
    let ctx = ScoringContext {
        library: job.library,
        cache: job.cache,
    };
    let workers = job.workers.unwrap_or(backend.descriptor().max_in_flight);
    let records = score_corpus(&corpus.samples, backend, &ctx, job.variant, job.directions, workers);

    let mut kept_samples = Vec::with_capacity(records.len());
    let mut kept_records = Vec::with_capacity(records.len());
    for (sample, record) in std::mem::take(&mut corpus.samples).into_iter().zip(records) {
        let deferred = sample.query_tokens.is_none() || sample.answer_tokens.is_none();
        if deferred && !admitted_after_scoring(&record, job.max_tokens, job.length_mode) {
            report.deferred = report.deferred.saturating_sub(1);
            report.dropped_length += 1;
            report.rejections.push(Rejection {
                line: 0,
                id: Some(sample.id.clone()),
                reason: format!(
                    "too long at scoring time: {:?} query + {:?} answer tokens exceeds {}",
                    record.query_tokens, record.answer_tokens, job.max_tokens
                ),
            });
            continue;
        }
        kept_samples.push(sample);
        kept_records.push(record);
    }
    corpus.samples = kept_samples;
    report.kept = corpus.samples.len();
    ScoreOutput {
        records: kept_records,
        backend_calls: backend.calls() - calls_before,
    }
}

pub fn records_digest<T: Serialize>(records: &[T]) -> Result<String> {
    Ok(sha256_hex(&jsonl::to_bytes(records)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankManifest {
    pub schema_version: u32,
    pub model_id: String,
    pub k: usize,
    pub ranked: usize,
    /// Score records not ranked: missing RMI/PPL(Q), or not rankable under the partner model.
    pub excluded: usize,
    pub bin_sizes: Vec<usize>,
    pub input_digests: BTreeMap<String, String>,
}

/// Rank a model's scores. With `partner`, only ids rankable under both
/// models take part, so the two rankings can be paired.
pub fn rank_stage(
    scores: &[ScoreRecord],
    partner: Option<&[ScoreRecord]>,
    k: usize,
) -> Result<(Vec<RankRecord>, RankManifest)> {
    let partner_ok: Option<HashSet<&str>> = partner.map(|p| {
        p.iter()
            .filter(|r| r.is_rankable())
            .map(|r| r.sample_id.as_str())
            .collect()
    });
    let eligible: Vec<ScoreRecord> = scores
        .iter()
        .filter(|r| r.is_rankable())
        .filter(|r| partner_ok.as_ref().is_none_or(|ok| ok.contains(r.sample_id.as_str())))
        .cloned()
        .collect();
    let (ranks, strat) = ranking::rank(&eligible, k)?;
    let mut input_digests = BTreeMap::new();
    input_digests.insert("scores".to_owned(), records_digest(scores)?);
    if let Some(p) = partner {
        input_digests.insert("partner_scores".to_owned(), records_digest(p)?);
    }
    let manifest = RankManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        model_id: scores.first().map(|r| r.model_id.clone()).unwrap_or_default(),
        k,
        ranked: ranks.len(),
        excluded: scores.len() - ranks.len(),
        bin_sizes: strat.bin_sizes(),
        input_digests,
    };
    Ok((ranks, manifest))
}

/// Apply a selection spec; the manifest digests exactly the inputs supplied.
pub fn select_stage(
    spec: &SelectionSpec,
    inputs: &SelectionInputs<'_>,
) -> Result<(Selection, SelectionManifest)> {
    let selection = select(spec, inputs)?;
    let mut digests = BTreeMap::new();
    if let Some(r) = inputs.ranks {
        digests.insert("ranks".to_owned(), records_digest(r)?);
    }
    if let Some(p) = inputs.paired {
        digests.insert("paired".to_owned(), records_digest(p)?);
    }
    if let Some(s) = inputs.scores {
        digests.insert("scores".to_owned(), records_digest(s)?);
    }
    let manifest = SelectionManifest::new(spec, &selection, inputs.ranks, digests);
    Ok((selection, manifest))
}

/// Which inputs a run hands to a strategy. Strong ranks are always supplied
/// so the manifest can report per-bin counts.
pub fn run_selection_inputs<'a>(
    strategy: Strategy,
    ranks: &'a [RankRecord],
    paired: Option<&'a [PairedRanks]>,
    scores: &'a [ScoreRecord],
) -> SelectionInputs<'a> {
    SelectionInputs {
        ranks: Some(ranks),
        paired: if strategy.needs_pairs() { paired } else { None },
        scores: (strategy == Strategy::IfdClosestToOne).then_some(scores),
    }
}

/// Files written by a run, name → SHA-256.
#[derive(Debug, Default)]
struct Outputs {
    dir: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        jsonl::write_atomic(&self.dir.join(name), bytes)?;
        self.files.insert(name.to_owned(), sha256_hex(bytes));
        Ok(())
    }

    fn record_existing(&mut self, path: &Path) -> Result<()> {
        let bytes = jsonl::read_bytes(path)?;
        let name = path
            .strip_prefix(&self.dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.files.insert(name, sha256_hex(&bytes));
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub ok: usize,
    pub partial: usize,
    pub failed: usize,
}

impl StatusCounts {
    pub fn of(records: &[ScoreRecord]) -> Self {
        let mut c = StatusCounts::default();
        for r in records {
            match r.status {
                ScoreStatus::Ok => c.ok += 1,
                ScoreStatus::Partial => c.partial += 1,
                ScoreStatus::Failed => c.failed += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub name: String,
    pub strategy: Strategy,
    pub selected: usize,
    pub candidates: usize,
    pub realized_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub kept: usize,
    pub dropped_length: usize,
    pub dropped_malformed: usize,
    pub deferred: usize,
}

/// Deterministic provenance for a run. Timings and call counts live in
/// `run_stats.json` so that this file is identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config: RunConfig,
    pub input_digests: BTreeMap<String, String>,
    pub corpus: CorpusSummary,
    /// Model id → status counts.
    pub scoring: BTreeMap<String, StatusCounts>,
    /// Model id → ranked samples.
    pub ranked: BTreeMap<String, usize>,
    pub paired: Option<usize>,
    pub selections: Vec<SelectionSummary>,
    /// Output file → SHA-256, excluding this manifest and the run stats.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub workers: Option<usize>,
    pub stages: Vec<StageTiming>,
    /// Model id → requests sent to the backend (0 on a warm cache).
    pub backend_calls: BTreeMap<String, usize>,
    pub cache_entries: usize,
    pub cache_corrupted_lines: usize,
}

#[derive(Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: RunManifest,
    pub stats: RunStats,
}

struct Timer {
    stages: Vec<StageTiming>,
    at: Instant,
}

impl Timer {
    fn new() -> Self {
        Timer {
            stages: Vec::new(),
            at: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.stages.push(StageTiming {
            stage: stage.to_owned(),
            millis: (now - self.at).as_secs_f64() * 1e3,
        });
        log::info!("stage {stage} done in {:.1} ms", (now - self.at).as_secs_f64() * 1e3);
        self.at = now;
    }
}

/// Load → score strong → score weak → rank → pair → select → analyze → emit.
pub fn run(config: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let mut timer = Timer::new();
    let library = config.library()?;
    let out_dir = config.resolve(&config.output_dir);
    let mut outputs = Outputs {
        dir: out_dir.clone(),
        ..Default::default()
    };
    let labels = match &config.labels {
        Some(p) => Some(defectlab::read_labels(&config.resolve(p))?),
        None => None,
    };

    let corpus_path = config.resolve(&config.corpus);
    let (mut corpus, mut report) = corpus::load_corpus(
        &corpus_path,
        &LoadOptions {
            max_tokens: config.max_tokens,
            length_mode: config.length_mode,
            tokenizer: None,
        },
    )?;
    let cache = match &config.cache {
        Some(p) => ScoreCache::open(&config.resolve(p))?,
        None => ScoreCache::in_memory(),
    };
    timer.lap("load");

    // Backends are opened on the full corpus, before any length filtering.
    let strong_backend = Backend::open(config.resolved_backend(&config.strong), Some(&corpus), &library)?;
    let weak_backend = match &config.weak {
        Some(w) => Some(Backend::open(config.resolved_backend(w), Some(&corpus), &library)?),
        None => None,
    };

    let job = ScoreJob {
        library: &library,
        cache: &cache,
        variant: config.variant,
        directions: &config.directions,
        workers: opts.workers,
        max_tokens: config.max_tokens,
        length_mode: config.length_mode,
    };
    let mut backend_calls = BTreeMap::new();
    let strong = score_stage(&mut corpus, &mut report, &strong_backend, &job);
    backend_calls.insert(config.strong.model_id.clone(), strong.backend_calls);
    let mut strong_scores = strong.records;
    timer.lap("score_strong");

    let weak_scores = match &weak_backend {
        Some(b) => {
            let before = corpus.samples.len();
            let out = score_stage(&mut corpus, &mut report, b, &job);
            backend_calls.insert(b.model_id().to_owned(), out.backend_calls);
            if corpus.samples.len() != before {
                // the weak tokenizer dropped more samples; keep the sets aligned
                let keep: HashSet<&str> = corpus.samples.iter().map(|s| s.id.as_str()).collect();
                strong_scores.retain(|r| keep.contains(r.sample_id.as_str()));
            }
            timer.lap("score_weak");
            Some(out.records)
        }
        None => None,
    };

    let mut variant_scores = BTreeMap::new();
    for &v in &config.sensitivity_variants {
        let vjob = ScoreJob { variant: v, ..job };
        let out = score_stage(&mut corpus, &mut report, &strong_backend, &vjob);
        *backend_calls.entry(config.strong.model_id.clone()).or_insert(0) += out.backend_calls;
        variant_scores.insert(v, out.records);
    }
    if !variant_scores.is_empty() {
        timer.lap("score_variants");
    }

    outputs.write(LOAD_REPORT_FILE, &jsonl::to_pretty(&report)?)?;
    outputs.write(&scores_file("strong", None), &jsonl::to_bytes(&strong_scores)?)?;
    if let Some(w) = &weak_scores {
        outputs.write(&scores_file("weak", None), &jsonl::to_bytes(w)?)?;
    }
    for (v, recs) in &variant_scores {
        outputs.write(&scores_file("strong", Some(*v)), &jsonl::to_bytes(recs)?)?;
    }

    let (strong_ranks, strong_rank_manifest) =
        rank_stage(&strong_scores, weak_scores.as_deref(), config.k)?;
    write_ranks_into(&mut outputs, "strong", &strong_ranks, &strong_rank_manifest)?;
    let mut ranked = BTreeMap::new();
    ranked.insert(config.strong.model_id.clone(), strong_ranks.len());
    let mut paired = None;
    if let Some(w) = &weak_scores {
        let (weak_ranks, weak_manifest) = rank_stage(w, Some(&strong_scores), config.k)?;
        write_ranks_into(&mut outputs, "weak", &weak_ranks, &weak_manifest)?;
        ranked.insert(weak_manifest.model_id.clone(), weak_ranks.len());
        let p = pair_ranks(&strong_ranks, &weak_ranks)?;
        outputs.write(PAIRED_FILE, &jsonl::to_bytes(&p)?)?;
        paired = Some(p);
    }
    timer.lap("rank");

    let mut selections = Vec::new();
    let mut selected_ids = BTreeMap::new();
    for named in &config.selections {
        let mut spec = named.spec.clone();
        spec.k = config.k;
        let inputs = run_selection_inputs(spec.strategy, &strong_ranks, paired.as_deref(), &strong_scores);
        let (selection, manifest) = select_stage(&spec, &inputs)?;
        let file = selection_file(&named.name);
        outputs.write(&file, &ids_to_bytes(&selection.ids))?;
        let manifest_name = manifest_path_for(Path::new(&file)).to_string_lossy().into_owned();
        outputs.write(&manifest_name, &jsonl::to_pretty(&manifest)?)?;
        selections.push(SelectionSummary {
            name: named.name.clone(),
            strategy: spec.strategy,
            selected: selection.ids.len(),
            candidates: selection.candidates,
            realized_fraction: selection.realized_fraction(),
        });
        selected_ids.insert(named.name.clone(), selection.ids);
    }
    timer.lap("select");

    let mut variants = BTreeMap::new();
    if !variant_scores.is_empty() {
        variants.insert(config.variant, strong_scores.clone());
        variants.extend(variant_scores);
    }
    let analysis_inputs = AnalysisInputs {
        scores: &strong_scores,
        weak: weak_scores.as_deref(),
        stability: None,
        selections: selected_ids,
        variants,
        k: config.k,
    };
    let analysis_report = analysis::analyze(&analysis_inputs)?;
    for path in analysis::emit_report(&out_dir, &analysis_report, &analysis_inputs, true)? {
        outputs.record_existing(&path)?;
    }
    if let Some(labels) = &labels {
        let sep = defectlab::separation_metrics(&strong_scores, labels, config.k)?;
        outputs.write(SEPARATION_FILE, &jsonl::to_pretty(&sep)?)?;
    }
    timer.lap("analyze");

    let mut input_digests = BTreeMap::new();
    input_digests.insert("corpus".to_owned(), corpus.source_digest.clone());
    input_digests.insert("templates".to_owned(), library.digest());
    if let Some(labels) = &labels {
        input_digests.insert("labels".to_owned(), records_digest(labels)?);
    }
    let mut scoring = BTreeMap::new();
    scoring.insert(config.strong.model_id.clone(), StatusCounts::of(&strong_scores));
    if let (Some(w), Some(desc)) = (&weak_scores, &config.weak) {
        scoring.insert(desc.model_id.clone(), StatusCounts::of(w));
    }
    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: config.clone(),
        input_digests,
        corpus: CorpusSummary {
            kept: report.kept,
            dropped_length: report.dropped_length,
            dropped_malformed: report.dropped_malformed,
            deferred: report.deferred,
        },
        scoring,
        ranked,
        paired: paired.as_ref().map(Vec::len),
        selections,
        outputs: outputs.files.clone(),
    };
    jsonl::write_atomic(&out_dir.join(MANIFEST_FILE), &jsonl::to_pretty(&manifest)?)?;
    timer.lap("emit");

    let stats = RunStats {
        workers: opts.workers,
        stages: timer.stages,
        backend_calls,
        cache_entries: cache.len(),
        cache_corrupted_lines: cache.corrupted_lines(),
    };
    jsonl::write_atomic(&out_dir.join(RUN_STATS_FILE), &jsonl::to_pretty(&stats)?)?;
    Ok(RunSummary {
        output_dir: out_dir,
        manifest,
        stats,
    })
}

fn write_ranks_into(
    outputs: &mut Outputs,
    role: &str,
    ranks: &[RankRecord],
    manifest: &RankManifest,
) -> Result<()> {
    let file = ranks_file(role);
    outputs.write(&file, &jsonl::to_bytes(ranks)?)?;
    let manifest_name = manifest_path_for(Path::new(&file)).to_string_lossy().into_owned();
    outputs.write(&manifest_name, &jsonl::to_pretty(manifest)?)
}

/// Write rank records and their manifest (`x.jsonl` → `x.manifest.json`).
pub fn write_ranks(path: &Path, ranks: &[RankRecord], manifest: &RankManifest) -> Result<PathBuf> {
    jsonl::write_atomic(path, &jsonl::to_bytes(ranks)?)?;
    let manifest_path = manifest_path_for(path);
    jsonl::write_atomic(&manifest_path, &jsonl::to_pretty(manifest)?)?;
    Ok(manifest_path)
}
