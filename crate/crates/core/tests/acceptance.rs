//! Acceptance suite. Run with
//!
//!     cargo test -p rmisel-core --test acceptance -- --nocapture
//!
//! Prints one PASS/FAIL line per criterion (SKIP for the optional live-model
//! check when no endpoint is configured) and fails if any criterion fails.
//!
//! Criterion 9 needs a teacher-forcing server:
//! `RMISEL_SMOKE_ENDPOINT` (URL), `RMISEL_SMOKE_CORPUS` (JSONL, ~200 samples),
//! optional `RMISEL_SMOKE_MODEL`, `RMISEL_SMOKE_PROTOCOL` (`teacher_forcing` or
//! `openai_echo`) and `RMISEL_SMOKE_FAMILY`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rmisel_core::analysis::{overlap, pearson, spearman};
use rmisel_core::corpus::{Corpus, Sample, ScoreCache};
use rmisel_core::defectlab::{self, DefectMode, DefectSpec};
use rmisel_core::pipeline::{self, RunConfig, RunOptions};
use rmisel_core::ranking::{
    rank, select, PairedRanks, RankRecord, SelectionInputs, SelectionSpec, Strategy,
};
use rmisel_core::scoring::{
    ifd, perplexity, rmi, score_corpus, Backend, BackendDescriptor, NgramConfig, ScoreRecord,
    ScoreStatus, ScoringContext,
};
use rmisel_core::templating::{
    Direction, TemplateLibrary, TemplateVariant, REVERSE_TASK_INSTRUCTION,
};

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let held: bool = $cond;
        if !held {
            return Err(format!($($msg)+));
        }
    }};
}

fn line(text: &str) {
    // Written straight to the stderr handle so the lines survive test capture.
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{text}");
}

fn record(id: String, ppl_q: Option<f64>, rmi_v: Option<f64>) -> ScoreRecord {
    ScoreRecord {
        sample_id: id,
        model_id: "m".into(),
        template_variant: TemplateVariant::Standard,
        ppl_q,
        ppl_q_given_a: None,
        ppl_a: None,
        ppl_a_given_q: None,
        rmi: rmi_v,
        ifd: None,
        ifd_hinders: false,
        status: ScoreStatus::Ok,
        failures: BTreeMap::new(),
        query_tokens: None,
        answer_tokens: None,
    }
}

// ---- criterion 1 -------------------------------------------------------

/// Error-free transformation a + b = s + e.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// Double-double accumulate, divide, then exp with a first-order correction
/// for the low word.
fn ppl_oracle(logprobs: &[f64]) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for &x in logprobs {
        let (s, e) = two_sum(hi, x);
        let (h, l) = two_sum(s, e + lo);
        hi = h;
        lo = l;
    }
    let n = logprobs.len() as f64;
    let q_hi = hi / n;
    // remainder of the division, exact via fma
    let r = (-q_hi).mul_add(n, hi) + lo;
    let q_lo = r / n;
    let base = (-q_hi).exp();
    base * (1.0 - q_lo)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(1..=512);
        let scale = [0.5, 5.0, 30.0][rng.random_range(0..3)];
        let v: Vec<f64> = (0..len).map(|_| -rng.random::<f64>() * scale).collect();
        let got = perplexity(&v).map_err(|e| e.to_string())?;
        let want = ppl_oracle(&v);
        worst = worst.max(((got - want) / want).abs());
    }
    let elapsed = start.elapsed();
    ensure!(worst <= 1e-12, "max relative error {worst:e}");
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("max rel err {worst:.1e}, {elapsed:.2?}"))
}

// ---- criterion 2 -------------------------------------------------------

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let a = 10f64.powf(rng.random_range(-3.0..6.0));
        let b = 10f64.powf(rng.random_range(-3.0..6.0));
        let r = rmi(a, b).map_err(|e| e.to_string())?;
        let want_r = (a / b).ln();
        worst = worst.max((r - want_r).abs() / want_r.abs().max(1.0));
        let i = ifd(a, b).map_err(|e| e.to_string())?;
        let want_i = (a.ln() - b.ln()).exp();
        worst = worst.max(((i - want_i) / want_i).abs());
        ensure!(rmi(a, a).unwrap() == 0.0, "rmi({a}, {a}) != 0");
        ensure!(ifd(b, b).unwrap() == 1.0, "ifd({b}, {b}) != 1");
    }
    ensure!(worst <= 1e-12, "max error {worst:e}");
    ensure!(rmi(0.0, 1.0).is_err() && ifd(1.0, -2.0).is_err(), "non-positive input accepted");
    Ok(format!("max err {worst:.1e}; rmi(p,p)=0, ifd(p,p)=1 exactly"))
}

// ---- criterion 3 -------------------------------------------------------

/// (bin, within-bin rank, bin size) per id, by sorting and chunking.
fn stratify_oracle(records: &[ScoreRecord], k: usize) -> BTreeMap<String, (usize, usize, usize)> {
    let mut rows: Vec<(f64, f64, &str)> = records
        .iter()
        .filter_map(|r| Some((r.ppl_q?, r.rmi?, r.sample_id.as_str())))
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.2.cmp(b.2)));
    let n = rows.len();
    let mut out = BTreeMap::new();
    let mut start = 0;
    for bin in 0..k {
        let size = n / k + usize::from(bin < n % k);
        let mut members = rows[start..start + size].to_vec();
        start += size;
        members.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.2.cmp(b.2)));
        for (i, m) in members.iter().enumerate() {
            out.insert(m.2.to_owned(), (bin, i + 1, size));
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let ks = [1usize, 5, 10, 20, 50];
    let start = Instant::now();
    let mut tied_tables = 0;
    for t in 0..200 {
        let k = ks[t % ks.len()];
        let n = rng.random_range(k..=2000);
        // Narrow value grids in half the tables force duplicated ppl_q and RMI.
        let tied = t % 2 == 0;
        let records: Vec<ScoreRecord> = (0..n)
            .map(|i| {
                let ppl_q = if tied {
                    rng.random_range(1..=12) as f64
                } else {
                    rng.random_range(1.0..500.0)
                };
                let r = if tied {
                    rng.random_range(-3..=3) as f64 * 0.5
                } else {
                    rng.random_range(-4.0..4.0)
                };
                // scrambled ids so id order is unrelated to generation order
                let id = format!("{:08x}-{i}", rng.random::<u32>());
                let unrankable = rng.random_range(0..50) == 0;
                record(id, (!unrankable).then_some(ppl_q), Some(r))
            })
            .collect();
        let rankable = records.iter().filter(|r| r.ppl_q.is_some()).count();
        if rankable < k {
            continue;
        }
        tied_tables += usize::from(tied);
        let (ranks, strat) = rank(&records, k).map_err(|e| e.to_string())?;
        let want = stratify_oracle(&records, k);
        ensure!(ranks.len() == want.len(), "table {t}: {} ranked, oracle {}", ranks.len(), want.len());
        ensure!(strat.excluded == n - rankable, "table {t}: excluded count");
        for r in &ranks {
            let &(bin, pos, size) = &want[&r.sample_id];
            ensure!(
                (r.bin, r.within_bin_rank, r.bin_size) == (bin, pos, size),
                "table {t} (N={n}, K={k}) id {}: got ({}, {}, {}), oracle ({bin}, {pos}, {size})",
                r.sample_id,
                r.bin,
                r.within_bin_rank,
                r.bin_size
            );
            ensure!(r.normalized_rank == pos as f64 / size as f64, "normalized rank of {}", r.sample_id);
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("200 tables ({tied_tables} with ties) match, {elapsed:.2?}"))
}

// ---- criterion 4 -------------------------------------------------------

fn pair(id: &str, diff: f64) -> PairedRanks {
    PairedRanks {
        sample_id: id.into(),
        r_s: 0.5 + diff / 2.0,
        r_w: 0.5 - diff / 2.0,
        diff,
        sum: 1.0,
    }
}

fn criterion_4() -> Outcome {
    // DiffHigh: strict inequality at τ = 0.1, including values at and just
    // around the threshold.
    let diffs = [
        0.1,
        0.1 + f64::EPSILON,
        0.1 - f64::EPSILON,
        0.10000000000000002,
        0.5,
        -0.5,
        -0.1,
        0.0,
        0.9,
        0.2,
        0.1,
    ];
    let pairs: Vec<PairedRanks> = diffs
        .iter()
        .enumerate()
        .map(|(i, &d)| pair(&format!("p{i:02}"), d))
        .collect();
    let spec = SelectionSpec::new(Strategy::DiffHigh);
    ensure!(spec.tau == 0.1, "default tau {}", spec.tau);
    let got: BTreeSet<String> = select(&spec, &SelectionInputs { paired: Some(&pairs), ..Default::default() })
        .map_err(|e| e.to_string())?
        .ids
        .into_iter()
        .collect();
    let want: BTreeSet<String> = pairs.iter().filter(|p| p.diff > 0.1).map(|p| p.sample_id.clone()).collect();
    ensure!(got == want, "DiffHigh picked {got:?}, want {want:?}");

    // RmiPercentileRange [0.5, 0.75) on uniform synthetic data.
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_dev = 0.0f64;
    for (n, k) in [(1000usize, 10usize), (997, 10), (2000, 7), (503, 20), (120, 50)] {
        let records: Vec<ScoreRecord> = (0..n)
            .map(|i| record(format!("u{i:05}"), Some(rng.random_range(1.0..100.0)), Some(rng.random_range(-2.0..2.0))))
            .collect();
        let (ranks, _) = rank(&records, k).map_err(|e| e.to_string())?;
        let spec = SelectionSpec::new(Strategy::RmiPercentileRange).with_range(0.5, 0.75);
        let sel = select(&spec, &SelectionInputs { ranks: Some(&ranks), ..Default::default() })
            .map_err(|e| e.to_string())?;
        let dev = (sel.realized_fraction() - 0.25).abs();
        ensure!(dev <= k as f64 / n as f64, "N={n} K={k}: realized {}", sel.realized_fraction());
        worst_dev = worst_dev.max(dev);
        let ok = sel.ids.iter().all(|id| {
            let r: &RankRecord = ranks.iter().find(|r| &r.sample_id == id).unwrap();
            (0.5..0.75).contains(&r.normalized_rank)
        });
        ensure!(ok, "N={n} K={k}: selected rank outside [0.5, 0.75)");
    }

    // IfdClosestToOne: |ifd − 1| ascending, ≤ 1 preferred on ties, then id.
    let ifds = [1.0, 0.9, 1.1, 0.75, 1.25, 2.0, 0.5, 1.5, 1.0, 0.9, 1.1, 3.0];
    let scores: Vec<ScoreRecord> = ifds
        .iter()
        .enumerate()
        .map(|(i, &v)| ScoreRecord { ifd: Some(v), ..record(format!("f{:02}", 11 - i), None, None) })
        .collect();
    let mut oracle: Vec<(f64, bool, String)> = scores
        .iter()
        .map(|s| {
            let v = s.ifd.unwrap();
            ((v - 1.0).abs(), v > 1.0, s.sample_id.clone())
        })
        .collect();
    oracle.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for fraction in [0.25, 0.5, 1.0] {
        let spec = SelectionSpec::new(Strategy::IfdClosestToOne).with_fraction(fraction);
        let sel = select(&spec, &SelectionInputs { scores: Some(&scores), ..Default::default() })
            .map_err(|e| e.to_string())?;
        let take = (fraction * scores.len() as f64).round() as usize;
        let want: Vec<String> = oracle.iter().take(take).map(|o| o.2.clone()).collect();
        ensure!(sel.ids == want, "fraction {fraction}: got {:?}, want {want:?}", sel.ids);
    }
    Ok(format!(
        "DiffHigh strict set ({} of {}), range max |dev| {worst_dev:.4}, IFD order matches",
        want.len(),
        pairs.len()
    ))
}

// ---- criterion 5 -------------------------------------------------------

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let modes = [DefectMode::Clean, DefectMode::KeywordEcho, DefectMode::Misalignment];
    let spec = DefectSpec::uniform(&modes, 1);
    let generated = defectlab::generate_corpus(&spec, 1000).map_err(|e| e.to_string())?;
    let corpus = Corpus {
        samples: generated.samples.clone(),
        source_digest: String::new(),
    };
    let lib = TemplateLibrary::builtin();
    let backend = Backend::open(
        BackendDescriptor::builtin("ngram", NgramConfig::default()),
        Some(&corpus),
        &lib,
    )
    .map_err(|e| e.to_string())?;
    let cache = ScoreCache::in_memory();
    let ctx = ScoringContext { library: &lib, cache: &cache };
    let scores = score_corpus(
        &corpus.samples,
        &backend,
        &ctx,
        TemplateVariant::Standard,
        &[Direction::QUnconditional, Direction::QGivenA],
        4,
    );
    ensure!(scores.iter().all(|s| s.is_rankable()), "unscored samples");

    // Independent tally from the rank records.
    let (ranks, _) = rank(&scores, 10).map_err(|e| e.to_string())?;
    let mode_of: BTreeMap<&str, DefectMode> =
        generated.labels.iter().map(|l| (l.id.as_str(), l.mode)).collect();
    let mut rmis: BTreeMap<DefectMode, Vec<f64>> = BTreeMap::new();
    let mut top2: BTreeMap<DefectMode, usize> = BTreeMap::new();
    let mut bottom2: BTreeMap<DefectMode, usize> = BTreeMap::new();
    for r in &ranks {
        let m = mode_of[r.sample_id.as_str()];
        rmis.entry(m).or_default().push(r.rmi);
        let decile = (10 * r.within_bin_rank).div_ceil(r.bin_size);
        if decile >= 9 {
            *top2.entry(m).or_default() += 1;
        }
        if decile <= 2 {
            *bottom2.entry(m).or_default() += 1;
        }
    }
    let median = |m: DefectMode| {
        let mut v = rmis[&m].clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 }
    };
    let (me, mc, mm) = (
        median(DefectMode::KeywordEcho),
        median(DefectMode::Clean),
        median(DefectMode::Misalignment),
    );
    let echo_top = top2.get(&DefectMode::KeywordEcho).copied().unwrap_or(0) as f64
        / rmis[&DefectMode::KeywordEcho].len() as f64;
    let mis_bottom = bottom2.get(&DefectMode::Misalignment).copied().unwrap_or(0) as f64
        / rmis[&DefectMode::Misalignment].len() as f64;

    let report = defectlab::separation_metrics(&scores, &generated.labels, 10).map_err(|e| e.to_string())?;
    let echo = report.mode(DefectMode::KeywordEcho).ok_or("no echo summary")?;
    let mis = report.mode(DefectMode::Misalignment).ok_or("no misalignment summary")?;
    ensure!(
        echo.rmi_median == Some(me) && echo.top2_fraction == echo_top && mis.bottom2_fraction == mis_bottom,
        "separation report disagrees with the direct tally"
    );

    let elapsed = start.elapsed();
    let detail = format!(
        "medians echo {me:.3} > clean {mc:.3} > misalignment {mm:.3}; echo top-2 {echo_top:.3}, misalignment bottom-2 {mis_bottom:.3}, {elapsed:.2?}"
    );
    ensure!(me > mc && mc > mm, "median order broken: {detail}");
    ensure!(echo_top >= 0.6 && mis_bottom >= 0.6, "placement below 0.6: {detail}");
    ensure!(elapsed < Duration::from_secs(60), "too slow: {detail}");
    Ok(detail)
}

// ---- criterion 6 -------------------------------------------------------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

/// Midranks by counting: 1 + #smaller + (#equal − 1)/2.
fn naive_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

fn criterion_6() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for n in 2..=7 {
        let base: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let raw_x: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        for p in permutations(n) {
            let y: Vec<f64> = p.iter().map(|&i| i as f64).collect();
            // distinct ranks: closed form
            let d2: f64 = base.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            let nf = n as f64;
            let rho = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
            let got = spearman(&base, &y).map_err(|e| e.to_string())?;
            worst = worst.max((got - rho).abs());
            let got = pearson(&raw_x, &y).map_err(|e| e.to_string())?;
            worst = worst.max((got - naive_pearson(&raw_x, &y)).abs());
            cases += 2;
        }
    }
    for t in 0..100 {
        let n = rng.random_range(3..60);
        let levels = rng.random_range(2..6);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect();
        let (rx, ry) = (naive_ranks(&x), naive_ranks(&y));
        let want = naive_pearson(&rx, &ry);
        match spearman(&x, &y) {
            Ok(got) => {
                ensure!(want.is_finite(), "tied case {t}: oracle undefined, got {got}");
                worst = worst.max((got - want).abs());
            }
            Err(_) => ensure!(!want.is_finite(), "tied case {t}: spearman failed, oracle {want}"),
        }
        cases += 1;
    }
    ensure!(worst <= 1e-12, "max error {worst:e}");

    let a: Vec<String> = (0..100).map(|i| format!("s{i:04}")).collect();
    let b: Vec<String> = (86..186).map(|i| format!("s{i:04}")).collect();
    let o = overlap(&a, &b).map_err(|e| e.to_string())?;
    ensure!(o == 0.14, "overlap {o}");
    let wide: Vec<String> = (86..286).map(|i| format!("s{i:04}")).collect();
    let o2 = overlap(&a, &wide).map_err(|e| e.to_string())?;
    ensure!(o2 == 0.14, "overlap against the larger set {o2}");
    Ok(format!("{cases} cases, max err {worst:.1e}; overlap 14/100 = {o}"))
}

// ---- criterion 7 -------------------------------------------------------

const RUN_CONFIG: &str = r#"
corpus = "corpus.jsonl"
output_dir = "out"
cache = "cache.jsonl"
labels = "corpus.labels.jsonl"
sensitivity_variants = ["simplified_task", "prefix_only"]

[strong]
model_id = "ngram-strong"
kind = "builtin_ngram"

[weak]
model_id = "ngram-weak"
kind = "builtin_ngram"
ngram = { smoothing = 1.0, cache_weight = 0.1, cache_bigram_weight = 0.1 }

[[selection]]
name = "sweet-spot"
strategy = "rmi-percentile-range"
range = [0.5, 0.75]

[[selection]]
name = "diff-high"
strategy = "diff-high"

[[selection]]
name = "sum-low"
strategy = "sum-low"
fraction = 0.2

[[selection]]
name = "ifd"
strategy = "ifd-closest-to-one"
fraction = 0.2

[[selection]]
name = "random"
strategy = "random"
fraction = 0.1
seed = 7
"#;

fn run_in(dir: &Path, corpus: &Path, workers: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    std::fs::copy(corpus, dir.join("corpus.jsonl")).map_err(|e| e.to_string())?;
    let labels = defectlab::labels_path_for(corpus);
    std::fs::copy(&labels, dir.join("corpus.labels.jsonl")).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("run.toml"), RUN_CONFIG).map_err(|e| e.to_string())?;
    collect_run(dir, workers)
}

fn collect_run(dir: &Path, workers: usize) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let config = RunConfig::load(&dir.join("run.toml")).map_err(|e| e.to_string())?;
    pipeline::run(&config, &RunOptions { workers: Some(workers) }).map_err(|e| e.to_string())?;
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(dir.join("out")).map_err(|e| e.to_string())? {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == pipeline::RUN_STATS_FILE {
            continue;
        }
        files.insert(name, std::fs::read(entry.path()).map_err(|e| e.to_string())?);
    }
    Ok(files)
}

fn criterion_7() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = DefectSpec::uniform(
        &[DefectMode::Clean, DefectMode::KeywordEcho, DefectMode::Misalignment, DefectMode::OffTopicQuery],
        11,
    );
    let generated = defectlab::generate_corpus(&spec, 300).map_err(|e| e.to_string())?;
    let corpus = tmp.path().join("src.jsonl");
    defectlab::write_generated(&corpus, &generated).map_err(|e| e.to_string())?;

    let one = run_in(&tmp.path().join("a"), &corpus, 1)?;
    let eight = run_in(&tmp.path().join("b"), &corpus, 8)?;
    let again = collect_run(&tmp.path().join("a"), 8)?; // warm cache rerun
    for required in ["manifest.json", "report.json", "separation.json", "selection.random.txt", "selection.diff-high.manifest.json"] {
        ensure!(one.contains_key(required), "run did not write {required}");
    }
    for (label, other) in [("workers 1 vs 8", &eight), ("first vs second run", &again)] {
        ensure!(
            one.keys().eq(other.keys()),
            "{label}: file sets differ: {:?} vs {:?}",
            one.keys().collect::<Vec<_>>(),
            other.keys().collect::<Vec<_>>()
        );
        for (name, bytes) in &one {
            ensure!(&other[name] == bytes, "{label}: {name} differs");
        }
    }
    Ok(format!("{} artifacts byte-identical across 3 runs", one.len()))
}

// ---- criterion 8 -------------------------------------------------------

const DEEPSEEK_SYSTEM: &str = "You are an AI programming assistant, utilizing the Deepseek Coder model, developed by Deepseek Company, and you only answer questions related to computer science. For politically sensitive questions, security and privacy issues, and other non-computer science questions, you will refuse to answer.";
const QWEN_SYSTEM: &str = "You are an AI programming assistant, and you only answer questions related to computer science. For politically sensitive questions, security and privacy issues, and other non-computer science questions, you will refuse to answer.";
const REVERSE_TASK: &str = "TASK: Given an answer, generate the most likely computer science question that this answer is responding to. If the inferred question is outside computer science, respond with \"INVALID\".";
const SIMPLIFIED_TASK: &str = "TASK: Given an answer, generate the most likely question that this answer is responding to.";

fn criterion_8() -> Outcome {
    let lib = TemplateLibrary::builtin();
    let s = Sample::new("t1", "What is a hash map?", "A table keyed by hashes.");
    ensure!(REVERSE_TASK_INSTRUCTION == REVERSE_TASK, "reverse instruction constant drifted");
    let mut checked = 0;
    for (family, system) in [("deepseek-coder", DEEPSEEK_SYSTEM), ("qwen3", QWEN_SYSTEM)] {
        for d in Direction::ALL {
            let p = lib
                .plan(&s, TemplateVariant::Standard, family, d)
                .map_err(|e| e.to_string())?;
            ensure!(p.context_text.contains(system), "{family} {d}: system prompt missing");
            checked += 1;
        }
        let rev = lib
            .plan(&s, TemplateVariant::Standard, family, Direction::QGivenA)
            .map_err(|e| e.to_string())?;
        ensure!(rev.context_text.contains(REVERSE_TASK), "{family}: reverse task missing");
        ensure!(rev.context_text.contains("INVALID"), "{family}: INVALID clause missing");
        ensure!(rev.target_text == s.query, "{family}: target is not Q");
        let answer_at = rev.context_text.find(&s.answer).ok_or("answer missing")?;
        ensure!(answer_at > rev.context_text.find(REVERSE_TASK).unwrap(), "{family}: answer precedes the task");

        let simp = lib
            .plan(&s, TemplateVariant::SimplifiedTask, family, Direction::QGivenA)
            .map_err(|e| e.to_string())?;
        let user_turn = &simp.context_text[simp.context_text.find(SIMPLIFIED_TASK).ok_or("simplified task missing")?..];
        ensure!(
            !user_turn.contains("computer science") && !user_turn.contains("INVALID"),
            "{family}: simplified user turn keeps domain or refusal wording"
        );

        let raw = lib
            .plan(&s, TemplateVariant::PureRaw, family, Direction::QUnconditional)
            .map_err(|e| e.to_string())?;
        ensure!(raw.context_text.is_empty() && raw.suffix_text.is_empty(), "{family}: PureRaw has context");
        ensure!(raw.target_text == s.query, "{family}: PureRaw target");
    }
    Ok(format!("{checked} Standard plans carry the exact system prompts; simplified and raw variants clean"))
}

// ---- criterion 9 -------------------------------------------------------

fn criterion_9() -> Option<Outcome> {
    let endpoint = std::env::var("RMISEL_SMOKE_ENDPOINT").ok().filter(|s| !s.is_empty())?;
    Some(smoke(endpoint))
}

fn smoke(endpoint: String) -> Outcome {
    let corpus_path = std::env::var("RMISEL_SMOKE_CORPUS").map_err(|_| "RMISEL_SMOKE_CORPUS not set".to_owned())?;
    let model = std::env::var("RMISEL_SMOKE_MODEL").unwrap_or_else(|_| "smoke-model".into());
    let protocol = match std::env::var("RMISEL_SMOKE_PROTOCOL").as_deref() {
        Ok("openai_echo") => rmisel_core::scoring::HttpProtocol::OpenaiEcho,
        _ => rmisel_core::scoring::HttpProtocol::TeacherForcing,
    };
    let mut desc = BackendDescriptor::builtin(model, NgramConfig::default());
    desc.kind = rmisel_core::scoring::BackendKind::HttpTeacherForcing;
    desc.endpoint = Some(endpoint);
    desc.protocol = protocol;
    if let Ok(f) = std::env::var("RMISEL_SMOKE_FAMILY") {
        desc.family = f;
    }
    let lib = TemplateLibrary::builtin();
    let (corpus, _) = rmisel_core::corpus::load_corpus(Path::new(&corpus_path), &Default::default())
        .map_err(|e| e.to_string())?;
    let samples: Vec<Sample> = corpus.samples.into_iter().take(200).collect();
    let backend = Backend::open(desc, None, &lib).map_err(|e| e.to_string())?;
    let cache = ScoreCache::in_memory();
    let ctx = ScoringContext { library: &lib, cache: &cache };
    let workers = backend.descriptor().max_in_flight;
    let scores = score_corpus(&samples, &backend, &ctx, TemplateVariant::Standard, &Direction::ALL, workers);
    let ok = scores.iter().filter(|s| s.status == ScoreStatus::Ok).count();
    let ok_rate = ok as f64 / scores.len().max(1) as f64;
    let (x, y): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .filter_map(|s| Some((s.rmi?, -s.ifd?.ln())))
        .unzip();
    let rho = spearman(&x, &y).map_err(|e| e.to_string())?;
    let detail = format!("{} samples, ok rate {ok_rate:.3}, spearman(rmi, -ln ifd) {rho:.3}", scores.len());
    ensure!(ok_rate >= 0.95, "{detail}");
    ensure!(rho > -0.2 && rho < 0.6, "{detail}");
    Ok(detail)
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        (1, "perplexity vs double-double oracle", criterion_1),
        (2, "rmi / ifd exactness", criterion_2),
        (3, "stratified ranking vs sort-and-chunk oracle", criterion_3),
        (4, "selection semantics", criterion_4),
        (5, "defect separation", criterion_5),
        (6, "correlation and overlap oracles", criterion_6),
        (7, "determinism across runs and workers", criterion_7),
        (8, "template fidelity", criterion_8),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        match f() {
            Ok(detail) => line(&format!("PASS {id} {name}: {detail}")),
            Err(why) => {
                line(&format!("FAIL {id} {name}: {why}"));
                failed.push(id);
            }
        }
    }
    match criterion_9() {
        None => line("SKIP 9 live-model smoke test (optional): RMISEL_SMOKE_ENDPOINT not set"),
        Some(Ok(detail)) => line(&format!("PASS 9 live-model smoke test: {detail}")),
        Some(Err(why)) => {
            line(&format!("FAIL 9 live-model smoke test: {why}"));
            failed.push(9);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
