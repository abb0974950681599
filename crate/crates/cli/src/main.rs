use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rmisel_core::analysis::{self, AnalysisInputs};
use rmisel_core::corpus::{self, LengthMode, LoadOptions, ScoreCache};
use rmisel_core::defectlab::{self, DefectSpec};
use rmisel_core::jsonl;
use rmisel_core::pipeline::{self, RankManifest, RunConfig, RunOptions, ScoreJob};
use rmisel_core::ranking::select::{manifest_path_for, write_selection};
use rmisel_core::ranking::{
    pair_ranks, PairedRanks, RankRecord, SelectionInputs, SelectionSpec, Strategy, DEFAULT_K,
    DEFAULT_TAU,
};
use rmisel_core::scoring::{Backend, BackendDescriptor, ScoreRecord, AUTH_TOKEN_ENV};
use rmisel_core::templating::{parse_directions, TemplateLibrary, TemplateVariant};

#[derive(Parser)]
#[command(name = "rmisel", version, about = "Score, rank and select instruction-tuning samples by reverse mutual information")]
struct Cli {
    /// More log output on stderr (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute perplexities, RMI and IFD for every sample
    Score(ScoreArgs),
    /// Stratify by PPL(Q) and rank RMI within bins
    Rank(RankArgs),
    /// Apply a selection strategy to ranked or scored samples
    Select(SelectArgs),
    /// Correlations, overlaps, per-bin dispersion and scatter CSVs
    Analyze(AnalyzeArgs),
    /// Write a synthetic corpus with planted defects and its labels
    GenerateDefects(GenerateArgs),
    /// Run the whole pipeline from a config file
    Run(RunArgs),
    /// Rewrite a score cache keeping the last entry per key
    CompactCache(CompactArgs),
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Backend descriptor (TOML or JSON)
    #[arg(long)]
    backend: PathBuf,
    #[arg(long, default_value = "standard")]
    variant: TemplateVariant,
    /// Comma-separated subset of q,q_given_a,a,a_given_q
    #[arg(long, default_value = "q,q_given_a,a,a_given_q")]
    directions: String,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value = "scores.jsonl")]
    out: PathBuf,
    /// Concurrent requests (defaults to the backend's max_in_flight)
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 2048)]
    max_tokens: usize,
    #[arg(long, value_enum, default_value = "joint")]
    length_mode: LengthModeArg,
    /// Directory of extra model-family template files
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Also write the corpus load report here
    #[arg(long)]
    load_report: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum LengthModeArg {
    Joint,
    Separate,
}

impl From<LengthModeArg> for LengthMode {
    fn from(v: LengthModeArg) -> Self {
        match v {
            LengthModeArg::Joint => LengthMode::Joint,
            LengthModeArg::Separate => LengthMode::Separate,
        }
    }
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    /// Scores of the other model; only ids rankable under both are ranked
    #[arg(long)]
    partner: Option<PathBuf>,
    #[arg(long, default_value = "ranks.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    strategy: Strategy,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    fraction: Option<f64>,
    /// Normalized-rank interval LO:HI, e.g. 0.5:0.75
    #[arg(long, value_parser = parse_range)]
    range: Option<[f64; 2]>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to the K recorded next to --ranks, else 10
    #[arg(long)]
    k: Option<usize>,
    /// Strong (or single-model) rank records
    #[arg(long)]
    ranks: Option<PathBuf>,
    /// Weak-model rank records; paired with --ranks on the fly
    #[arg(long, conflicts_with = "paired")]
    weak_ranks: Option<PathBuf>,
    #[arg(long)]
    paired: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value = "selection.txt")]
    out: PathBuf,
}

fn parse_range(s: &str) -> Result<[f64; 2], String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo = lo.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = hi.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok([lo, hi])
}

fn parse_named(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    if name.is_empty() {
        return Err("empty name".into());
    }
    Ok((name.to_owned(), PathBuf::from(path)))
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    weak_scores: Option<PathBuf>,
    /// Second score set for the same model (stability correlation)
    #[arg(long)]
    stability_scores: Option<PathBuf>,
    /// Named selection id list, NAME=PATH (repeatable)
    #[arg(long = "selection", value_parser = parse_named)]
    selections: Vec<(String, PathBuf)>,
    /// Scores under a template variant, VARIANT=PATH (repeatable)
    #[arg(long = "variant-scores", value_parser = parse_named)]
    variant_scores: Vec<(String, PathBuf)>,
    /// Defect labels; adds separation.json
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Skip the scatter CSVs
    #[arg(long)]
    no_figures: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Defect spec (TOML or JSON)
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value = "corpus.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct CompactArgs {
    #[arg(long)]
    cache: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .downcast_ref::<rmisel_core::Error>()
                .map(rmisel_core::Error::kind)
                .unwrap_or("cli");
            let payload = serde_json::json!({
                "error": { "kind": kind, "message": error_message(&err) }
            });
            eprintln!("{payload}");
            ExitCode::from(1)
        }
    }
}

/// Join the cause chain, skipping causes already spelled out by their parent.
fn error_message(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Score(a) => score(a),
        Command::Rank(a) => rank(a),
        Command::Select(a) => select(a),
        Command::Analyze(a) => analyze(a),
        Command::GenerateDefects(a) => generate(a),
        Command::Run(a) => run(a),
        Command::CompactCache(a) => compact(a),
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let directions = parse_directions(&a.directions)?;
    let library = match &a.templates {
        Some(dir) => TemplateLibrary::with_dir(dir)?,
        None => TemplateLibrary::builtin(),
    };
    let desc = BackendDescriptor::load(&a.backend)?;
    if desc.endpoint.is_some() && std::env::var_os(AUTH_TOKEN_ENV).is_some() {
        log::info!("using bearer token from {AUTH_TOKEN_ENV}");
    }
    let opts = LoadOptions {
        max_tokens: a.max_tokens,
        length_mode: a.length_mode.into(),
        tokenizer: None,
    };
    let (mut corpus, mut report) = corpus::load_corpus(&a.corpus, &opts)?;
    let backend = Backend::open(desc, Some(&corpus), &library)?;
    let cache = match &a.cache {
        Some(p) => ScoreCache::open(p)?,
        None => ScoreCache::in_memory(),
    };
    let job = ScoreJob {
        library: &library,
        cache: &cache,
        variant: a.variant,
        directions: &directions,
        workers: a.workers,
        max_tokens: a.max_tokens,
        length_mode: a.length_mode.into(),
    };
    let out = pipeline::score_stage(&mut corpus, &mut report, &backend, &job);
    jsonl::write_atomic(&a.out, &jsonl::to_bytes(&out.records)?)?;
    if let Some(p) = &a.load_report {
        jsonl::write_atomic(p, &jsonl::to_pretty(&report)?)?;
    }
    let status = pipeline::StatusCounts::of(&out.records);
    println!(
        "scored {} samples with {} ({} ok, {} partial, {} failed; {} backend calls; {} dropped by length) -> {}",
        out.records.len(),
        backend.model_id(),
        status.ok,
        status.partial,
        status.failed,
        out.backend_calls,
        report.dropped_length,
        a.out.display()
    );
    Ok(())
}

fn rank(a: RankArgs) -> Result<()> {
    let scores: Vec<ScoreRecord> = jsonl::read(&a.scores)?;
    let partner: Option<Vec<ScoreRecord>> = a.partner.as_deref().map(jsonl::read).transpose()?;
    let (ranks, manifest) = pipeline::rank_stage(&scores, partner.as_deref(), a.k)?;
    let manifest_path = pipeline::write_ranks(&a.out, &ranks, &manifest)?;
    println!(
        "ranked {} of {} samples into {} bins -> {} ({})",
        manifest.ranked,
        scores.len(),
        manifest.k,
        a.out.display(),
        manifest_path.display()
    );
    Ok(())
}

fn recorded_k(ranks_path: &Path) -> Option<usize> {
    let bytes = std::fs::read(manifest_path_for(ranks_path)).ok()?;
    serde_json::from_slice::<RankManifest>(&bytes).ok().map(|m| m.k)
}

fn select(a: SelectArgs) -> Result<()> {
    let k = a
        .k
        .or_else(|| a.ranks.as_deref().and_then(recorded_k))
        .unwrap_or(DEFAULT_K);
    let spec = SelectionSpec {
        strategy: a.strategy,
        k,
        tau: a.tau.unwrap_or(DEFAULT_TAU),
        fraction: a.fraction,
        range: a.range,
        seed: a.seed,
    };
    spec.validate()?;
    let ranks: Option<Vec<RankRecord>> = a.ranks.as_deref().map(jsonl::read).transpose()?;
    let mut paired: Option<Vec<PairedRanks>> = a.paired.as_deref().map(jsonl::read).transpose()?;
    if let Some(weak_path) = &a.weak_ranks {
        let strong = ranks
            .as_deref()
            .ok_or_else(|| anyhow!("--weak-ranks needs --ranks for the strong model"))?;
        let weak: Vec<RankRecord> = jsonl::read(weak_path)?;
        paired = Some(pair_ranks(strong, &weak)?);
    }
    let scores: Option<Vec<ScoreRecord>> = a.scores.as_deref().map(jsonl::read).transpose()?;
    if ranks.is_none() && paired.is_none() && scores.is_none() {
        bail!("select needs at least one of --ranks, --paired/--weak-ranks, --scores");
    }
    let inputs = SelectionInputs {
        ranks: ranks.as_deref(),
        paired: paired.as_deref(),
        scores: scores.as_deref(),
    };
    let (selection, manifest) = pipeline::select_stage(&spec, &inputs)?;
    let manifest_path = write_selection(&a.out, &selection.ids, &manifest)?;
    println!(
        "selected {} of {} ({:.4}) with {} -> {} ({})",
        selection.ids.len(),
        selection.candidates,
        selection.realized_fraction(),
        spec.strategy,
        a.out.display(),
        manifest_path.display()
    );
    Ok(())
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect())
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let scores: Vec<ScoreRecord> = jsonl::read(&a.scores)?;
    let weak: Option<Vec<ScoreRecord>> = a.weak_scores.as_deref().map(jsonl::read).transpose()?;
    let stability: Option<Vec<ScoreRecord>> =
        a.stability_scores.as_deref().map(jsonl::read).transpose()?;
    let mut selections = BTreeMap::new();
    for (name, path) in &a.selections {
        selections.insert(name.clone(), read_ids(path)?);
    }
    let mut variants = BTreeMap::new();
    for (name, path) in &a.variant_scores {
        let v: TemplateVariant = name.parse()?;
        variants.insert(v, jsonl::read(path)?);
    }
    let inputs = AnalysisInputs {
        scores: &scores,
        weak: weak.as_deref(),
        stability: stability.as_deref(),
        selections,
        variants,
        k: a.k,
    };
    let report = analysis::analyze(&inputs)?;
    let written = analysis::emit_report(&a.out_dir, &report, &inputs, !a.no_figures)?;
    if let Some(labels) = &a.labels {
        let labels = defectlab::read_labels(labels)?;
        let sep = defectlab::separation_metrics(&scores, &labels, a.k)?;
        jsonl::write_atomic(&a.out_dir.join(pipeline::SEPARATION_FILE), &jsonl::to_pretty(&sep)?)?;
    }
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into());
    println!(
        "spearman(rmi, -ln ifd) = {}; strong vs weak = {}; {} files in {}",
        fmt(report.spearman_rmi_vs_neg_log_ifd),
        fmt(report.spearman_strong_vs_weak),
        written.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let spec = DefectSpec::load(&a.spec)?;
    let generated = defectlab::generate_corpus(&spec, a.n)?;
    let labels = defectlab::write_generated(&a.out, &generated)?;
    println!(
        "wrote {} samples -> {} (labels {})",
        generated.samples.len(),
        a.out.display(),
        labels.display()
    );
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let config = RunConfig::load(&a.config)?;
    let summary = pipeline::run(&config, &RunOptions { workers: a.workers })?;
    for (model, c) in &summary.manifest.scoring {
        println!("{model}: {} ok, {} partial, {} failed", c.ok, c.partial, c.failed);
    }
    for s in &summary.manifest.selections {
        println!(
            "selection {}: {} of {} ({:.4})",
            s.name, s.selected, s.candidates, s.realized_fraction
        );
    }
    println!("outputs in {}", summary.output_dir.display());
    Ok(())
}

fn compact(a: CompactArgs) -> Result<()> {
    let cache = ScoreCache::open(&a.cache)?;
    let skipped = cache.corrupted_lines();
    let kept = cache.compact()?;
    println!("compacted {} to {kept} entries ({skipped} corrupted lines dropped)", a.cache.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_parsing() {
        assert_eq!(parse_range("0.5:0.75").unwrap(), [0.5, 0.75]);
        assert_eq!(parse_range(" 0 : 1 ").unwrap(), [0.0, 1.0]);
        assert!(parse_range("0.5").is_err());
        assert!(parse_range("a:b").is_err());
    }

    #[test]
    fn named_paths() {
        assert_eq!(parse_named("top=sel/top.txt").unwrap(), ("top".into(), PathBuf::from("sel/top.txt")));
        assert!(parse_named("=x").is_err());
        assert!(parse_named("noequals").is_err());
    }

    #[test]
    fn error_chain_is_not_repeated() {
        let err = anyhow!("inner").context("outer: inner");
        assert_eq!(error_message(&err), "outer: inner");
        let err = anyhow!("disk full").context("writing scores");
        assert_eq!(error_message(&err), "writing scores: disk full");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
