//! Correlations, selection overlaps, per-bin dispersion and plot-ready CSV output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::ranking::{self, select::ids_to_bytes};
use crate::scoring::ScoreRecord;
use crate::templating::TemplateVariant;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const OVERLAP_CONVENTION: &str = "|A ∩ B| / min(|A|, |B|)";

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Precondition(format!(
            "sequences differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Undefined(format!("need at least 2 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Undefined("non-finite input".into()));
    }
    Ok(())
}

/// Product-moment correlation, clamped to [−1, 1].
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    // sqrt of a rounded square is exact, so identical inputs give exactly 1
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
        .map_err(|_| Error::Undefined("zero rank variance".into()))
}

/// Fraction of the smaller set that also lies in the other.
pub fn overlap<S: AsRef<str>>(a: &[S], b: &[S]) -> Result<f64> {
    let a: BTreeSet<&str> = a.iter().map(AsRef::as_ref).collect();
    let b: BTreeSet<&str> = b.iter().map(AsRef::as_ref).collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::Undefined("overlap of an empty set".into()));
    }
    let shared = a.intersection(&b).count();
    Ok(shared as f64 / a.len().min(b.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub bin: usize,
    pub size: usize,
    pub ppl_q_min: f64,
    pub ppl_q_max: f64,
    pub rmi_mean: f64,
    /// Sample variance (n − 1); absent for a bin of one.
    pub rmi_variance: Option<f64>,
    pub rmi_min: f64,
    pub rmi_max: f64,
}

pub fn heteroscedasticity_summary(scores: &[ScoreRecord], k: usize) -> Result<Vec<BinSummary>> {
    let strat = ranking::stratify(scores, k)?;
    let mut out = Vec::with_capacity(strat.bins.len());
    for (b, members) in strat.bins.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let rmi: Vec<f64> = members.iter().map(|&i| scores[i].rmi.expect("rankable")).collect();
        let ppl: Vec<f64> = members.iter().map(|&i| scores[i].ppl_q.expect("rankable")).collect();
        let n = rmi.len() as f64;
        let mean = rmi.iter().sum::<f64>() / n;
        let variance = (rmi.len() > 1)
            .then(|| rmi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0));
        out.push(BinSummary {
            bin: b,
            size: members.len(),
            ppl_q_min: ppl.iter().copied().fold(f64::INFINITY, f64::min),
            ppl_q_max: ppl.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            rmi_mean: mean,
            rmi_variance: variance,
            rmi_min: rmi.iter().copied().fold(f64::INFINITY, f64::min),
            rmi_max: rmi.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEntry {
    pub reference: TemplateVariant,
    pub variant: TemplateVariant,
    pub n: usize,
    pub rmi_spearman: Option<f64>,
    pub ifd_spearman: Option<f64>,
}

/// Matched values for ids present in both sets, sorted by id.
fn matched<F>(a: &[ScoreRecord], b: &[ScoreRecord], f: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(&ScoreRecord) -> Option<f64>,
{
    let bmap: HashMap<&str, &ScoreRecord> = b.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let mut pairs: Vec<(&str, f64, f64)> = a
        .iter()
        .filter_map(|ra| {
            let rb = bmap.get(ra.sample_id.as_str())?;
            Some((ra.sample_id.as_str(), f(ra)?, f(rb)?))
        })
        .collect();
    pairs.sort_by(|p, q| p.0.cmp(q.0));
    pairs.into_iter().map(|(_, x, y)| (x, y)).unzip()
}

fn id_mismatch(a: &[ScoreRecord], b: &[ScoreRecord], a_name: &str, b_name: &str) -> Option<Error> {
    let ia: BTreeSet<&str> = a.iter().map(|r| r.sample_id.as_str()).collect();
    let ib: BTreeSet<&str> = b.iter().map(|r| r.sample_id.as_str()).collect();
    let mut missing: Vec<String> = ia.difference(&ib).map(|id| format!("{id} ({b_name})")).collect();
    missing.extend(ib.difference(&ia).map(|id| format!("{id} ({a_name})")));
    (!missing.is_empty()).then_some(Error::IdMismatch { missing })
}

/// RMI (and IFD where present) rank agreement of each variant with Standard.
pub fn template_sensitivity(
    sets: &BTreeMap<TemplateVariant, Vec<ScoreRecord>>,
) -> Result<Vec<SensitivityEntry>> {
    if sets.len() < 2 {
        return Err(Error::Precondition("template sensitivity needs at least two variants".into()));
    }
    let reference = TemplateVariant::Standard;
    let base = sets
        .get(&reference)
        .ok_or_else(|| Error::Precondition("template sensitivity needs the standard variant".into()))?;
    let mut out = Vec::new();
    for (&variant, records) in sets {
        if variant == reference {
            continue;
        }
        if let Some(err) = id_mismatch(base, records, reference.as_str(), variant.as_str()) {
            return Err(err);
        }
        let (x, y) = matched(base, records, |r| r.rmi);
        let rmi_spearman = spearman(&x, &y).ok();
        let (xi, yi) = matched(base, records, |r| r.ifd);
        let ifd_spearman = spearman(&xi, &yi).ok();
        out.push(SensitivityEntry {
            reference,
            variant,
            n: x.len(),
            rmi_spearman,
            ifd_spearman,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub scored: usize,
    pub rankable: usize,
    pub with_ifd: usize,
    pub weak_scored: Option<usize>,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub k: usize,
    pub counts: ReportCounts,
    pub spearman_rmi_vs_neg_log_ifd: Option<f64>,
    pub spearman_strong_vs_weak: Option<f64>,
    pub pearson_stability: Option<f64>,
    pub overlap_convention: String,
    /// "a|b" → overlap fraction, over every unordered pair of named selections.
    pub overlap_matrix: BTreeMap<String, f64>,
    pub per_bin: Vec<BinSummary>,
    pub per_bin_rmi_variance: Vec<Option<f64>>,
    pub template_sensitivity: Vec<SensitivityEntry>,
    /// Statistic name → why it could not be computed.
    pub undefined: BTreeMap<String, String>,
    pub input_digests: BTreeMap<String, String>,
}

/// Everything an analysis may use. Only `scores` is required.
#[derive(Debug, Clone, Default)]
pub struct AnalysisInputs<'a> {
    pub scores: &'a [ScoreRecord],
    pub weak: Option<&'a [ScoreRecord]>,
    /// A second score set for the same model, for the stability correlation.
    pub stability: Option<&'a [ScoreRecord]>,
    pub selections: BTreeMap<String, Vec<String>>,
    pub variants: BTreeMap<TemplateVariant, Vec<ScoreRecord>>,
    pub k: usize,
}

/// SHA-256 of the JSONL encoding of a score set.
pub fn scores_digest(scores: &[ScoreRecord]) -> Result<String> {
    Ok(sha256_hex(&jsonl::to_bytes(scores)?))
}

fn neg_log_ifd(r: &ScoreRecord) -> Option<f64> {
    r.ifd.map(|v| -v.ln())
}

pub fn analyze(inputs: &AnalysisInputs<'_>) -> Result<AnalysisReport> {
    let scores = inputs.scores;
    let mut undefined = BTreeMap::new();
    let mut record = |name: &str, res: Result<f64>| -> Option<f64> {
        match res {
            Ok(v) => Some(v),
            Err(e) => {
                undefined.insert(name.to_owned(), e.to_string());
                None
            }
        }
    };

    let mut sorted: Vec<&ScoreRecord> = scores.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let (x, y): (Vec<f64>, Vec<f64>) = sorted
        .iter()
        .filter_map(|r| Some((r.rmi?, neg_log_ifd(r)?)))
        .unzip();
    let spearman_rmi_vs_neg_log_ifd = record("spearman_rmi_vs_neg_log_ifd", spearman(&x, &y));

    let spearman_strong_vs_weak = inputs.weak.and_then(|weak| {
        let (a, b) = matched(scores, weak, |r| r.rmi);
        record("spearman_strong_vs_weak", spearman(&a, &b))
    });
    let pearson_stability = inputs.stability.and_then(|other| {
        let (a, b) = matched(scores, other, |r| r.rmi);
        record("pearson_stability", pearson(&a, &b))
    });

    let mut overlap_matrix = BTreeMap::new();
    let names: Vec<&String> = inputs.selections.keys().collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[i + 1..] {
            let key = format!("{a}|{b}");
            let v = overlap(&inputs.selections[*a], &inputs.selections[*b]);
            if let Some(v) = record(&format!("overlap:{key}"), v) {
                overlap_matrix.insert(key, v);
            }
        }
    }

    let per_bin = heteroscedasticity_summary(scores, inputs.k)?;
    let per_bin_rmi_variance = per_bin.iter().map(|b| b.rmi_variance).collect();

    let template_sensitivity = if inputs.variants.len() >= 2 {
        self::template_sensitivity(&inputs.variants)?
    } else {
        Vec::new()
    };

    let mut input_digests = BTreeMap::new();
    input_digests.insert("scores".to_owned(), scores_digest(scores)?);
    if let Some(w) = inputs.weak {
        input_digests.insert("weak_scores".to_owned(), scores_digest(w)?);
    }
    if let Some(s) = inputs.stability {
        input_digests.insert("stability_scores".to_owned(), scores_digest(s)?);
    }
    for (name, ids) in &inputs.selections {
        input_digests.insert(format!("selection:{name}"), sha256_hex(&ids_to_bytes(ids)));
    }
    for (variant, recs) in &inputs.variants {
        input_digests.insert(format!("variant:{variant}"), scores_digest(recs)?);
    }

    Ok(AnalysisReport {
        schema_version: REPORT_SCHEMA_VERSION,
        k: inputs.k,
        counts: ReportCounts {
            scored: scores.len(),
            rankable: scores.iter().filter(|r| r.is_rankable()).count(),
            with_ifd: scores.iter().filter(|r| r.ifd.is_some()).count(),
            weak_scored: inputs.weak.map(<[_]>::len),
            failed: scores
                .iter()
                .filter(|r| r.status == crate::scoring::ScoreStatus::Failed)
                .count(),
        },
        spearman_rmi_vs_neg_log_ifd,
        spearman_strong_vs_weak,
        pearson_stability,
        overlap_convention: OVERLAP_CONVENTION.to_owned(),
        overlap_matrix,
        per_bin,
        per_bin_rmi_variance,
        template_sensitivity,
        undefined,
        input_digests,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const CSV_IFD: &str = "rmi_vs_neg_log_ifd.csv";
pub const CSV_PPL: &str = "rmi_vs_ln_ppl_q.csv";
pub const CSV_VARIANT: &str = "standard_vs_variant_rmi.csv";

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_bytes<I>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::Validation(format!("csv encoding: {e}"));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::Validation(format!("csv encoding: {e}")))
}

/// Scatter data: one row per scored sample, in input order. Missing values are empty cells.
pub fn scatter_csvs(inputs: &AnalysisInputs<'_>) -> Result<BTreeMap<&'static str, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let scores = inputs.scores;
    out.insert(
        CSV_IFD,
        csv_bytes(
            &["sample_id", "rmi", "neg_log_ifd"],
            scores
                .iter()
                .map(|r| vec![r.sample_id.clone(), cell(r.rmi), cell(neg_log_ifd(r))]),
        )?,
    );
    let bins = ranking::stratify(scores, inputs.k)?.assignment();
    out.insert(
        CSV_PPL,
        csv_bytes(
            &["sample_id", "bin", "ln_ppl_q", "rmi"],
            scores.iter().enumerate().map(|(i, r)| {
                vec![
                    r.sample_id.clone(),
                    bins.get(&i).map(|b| b.to_string()).unwrap_or_default(),
                    cell(r.ppl_q.map(f64::ln)),
                    cell(r.rmi),
                ]
            }),
        )?,
    );
    let mut rows = Vec::new();
    if let Some(base) = inputs.variants.get(&TemplateVariant::Standard) {
        for (variant, recs) in &inputs.variants {
            if *variant == TemplateVariant::Standard {
                continue;
            }
            let map: HashMap<&str, &ScoreRecord> =
                recs.iter().map(|r| (r.sample_id.as_str(), r)).collect();
            for r in base {
                let other = map.get(r.sample_id.as_str()).and_then(|o| o.rmi);
                rows.push(vec![
                    r.sample_id.clone(),
                    variant.to_string(),
                    cell(r.rmi),
                    cell(other),
                ]);
            }
        }
    }
    out.insert(
        CSV_VARIANT,
        csv_bytes(&["sample_id", "variant", "standard_rmi", "variant_rmi"], rows)?,
    );
    Ok(out)
}

/// Write `report.json` and, with `figures`, the scatter CSVs into `dir`.
pub fn emit_report(
    dir: &Path,
    report: &AnalysisReport,
    inputs: &AnalysisInputs<'_>,
    figures: bool,
) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let path = dir.join(REPORT_FILE);
    jsonl::write_atomic(&path, &jsonl::to_pretty(report)?)?;
    written.push(path);
    if figures {
        for (name, bytes) in scatter_csvs(inputs)? {
            let path = dir.join(name);
            jsonl::write_atomic(&path, &bytes)?;
            written.push(path);
        }
    }
    Ok(written)
}
