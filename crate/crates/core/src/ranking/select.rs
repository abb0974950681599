use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PairedRanks, RankRecord};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::scoring::ScoreRecord;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Top fraction by stratified rank.
    RmiTopFraction,
    /// Top fraction by raw RMI, ignoring bins.
    RmiGlobalTopFraction,
    /// Stratified rank in [lo, hi) (hi = 1 is inclusive).
    RmiPercentileRange,
    /// diff > τ
    DiffHigh,
    /// diff < −τ
    DiffLow,
    SumHigh,
    SumLow,
    /// Smallest |IFD − 1|, IFD ≤ 1 first on ties.
    IfdClosestToOne,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::RmiTopFraction,
        Strategy::RmiGlobalTopFraction,
        Strategy::RmiPercentileRange,
        Strategy::DiffHigh,
        Strategy::DiffLow,
        Strategy::SumHigh,
        Strategy::SumLow,
        Strategy::IfdClosestToOne,
        Strategy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::RmiTopFraction => "rmi-top-fraction",
            Strategy::RmiGlobalTopFraction => "rmi-global-top-fraction",
            Strategy::RmiPercentileRange => "rmi-percentile-range",
            Strategy::DiffHigh => "diff-high",
            Strategy::DiffLow => "diff-low",
            Strategy::SumHigh => "sum-high",
            Strategy::SumLow => "sum-low",
            Strategy::IfdClosestToOne => "ifd-closest-to-one",
            Strategy::Random => "random",
        }
    }

    pub fn needs_pairs(self) -> bool {
        matches!(
            self,
            Strategy::DiffHigh | Strategy::DiffLow | Strategy::SumHigh | Strategy::SumLow
        )
    }

    fn needs_fraction(self) -> bool {
        matches!(
            self,
            Strategy::RmiTopFraction
                | Strategy::RmiGlobalTopFraction
                | Strategy::SumHigh
                | Strategy::SumLow
                | Strategy::IfdClosestToOne
                | Strategy::Random
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown selection strategy `{s}`")))
    }
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub strategy: Strategy,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SelectionSpec {
    pub fn new(strategy: Strategy) -> Self {
        SelectionSpec {
            strategy,
            k: DEFAULT_K,
            tau: DEFAULT_TAU,
            fraction: None,
            range: None,
            seed: None,
        }
    }

    pub fn with_fraction(mut self, fraction: f64) -> Self {
        self.fraction = Some(fraction);
        self
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = Some([lo, hi]);
        self
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if !self.tau.is_finite() {
            return Err(Error::Config("tau must be finite".into()));
        }
        if self.strategy.needs_fraction() {
            match self.fraction {
                Some(f) if f > 0.0 && f <= 1.0 => {}
                Some(f) => return Err(Error::Config(format!("fraction {f} is outside (0, 1]"))),
                None => {
                    return Err(Error::Config(format!(
                        "strategy `{}` needs a fraction",
                        self.strategy
                    )))
                }
            }
        }
        if self.strategy == Strategy::RmiPercentileRange {
            match self.range {
                Some([lo, hi]) if (0.0..hi).contains(&lo) && hi <= 1.0 => {}
                Some([lo, hi]) => {
                    return Err(Error::Config(format!(
                        "range [{lo}, {hi}) must satisfy 0 ≤ lo < hi ≤ 1"
                    )))
                }
                None => return Err(Error::Config("rmi-percentile-range needs a range".into())),
            }
        }
        Ok(())
    }
}

/// Whatever a strategy may draw on. Unused members may be `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SelectionInputs<'a> {
    /// Stratified ranks of the single (or strong) model.
    pub ranks: Option<&'a [RankRecord]>,
    pub paired: Option<&'a [PairedRanks]>,
    pub scores: Option<&'a [ScoreRecord]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub ids: Vec<String>,
    /// Size of the population the strategy chose from.
    pub candidates: usize,
}

impl Selection {
    pub fn realized_fraction(&self) -> f64 {
        if self.candidates == 0 {
            0.0
        } else {
            self.ids.len() as f64 / self.candidates as f64
        }
    }
}

fn take_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn missing(strategy: Strategy, what: &str) -> Error {
    Error::Config(format!("strategy `{strategy}` needs {what}"))
}

/// Apply a selection strategy. Output order is deterministic for every strategy.
pub fn select(spec: &SelectionSpec, inputs: &SelectionInputs<'_>) -> Result<Selection> {
    spec.validate()?;
    let fraction = spec.fraction.unwrap_or(1.0);
    let strategy = spec.strategy;
    match strategy {
        Strategy::RmiTopFraction => {
            let ranks = inputs.ranks.ok_or_else(|| missing(strategy, "rank records"))?;
            let cutoff = 1.0 - fraction;
            let mut chosen: Vec<&RankRecord> = ranks
                .iter()
                .filter(|r| r.normalized_rank > cutoff)
                .collect();
            sort_rank_desc(&mut chosen);
            Ok(from_ranks(chosen, ranks.len()))
        }
        Strategy::RmiPercentileRange => {
            let ranks = inputs.ranks.ok_or_else(|| missing(strategy, "rank records"))?;
            let [lo, hi] = spec.range.expect("validated");
            let mut chosen: Vec<&RankRecord> = ranks
                .iter()
                .filter(|r| {
                    let v = r.normalized_rank;
                    v >= lo && (v < hi || (hi >= 1.0 && v <= 1.0))
                })
                .collect();
            sort_rank_desc(&mut chosen);
            Ok(from_ranks(chosen, ranks.len()))
        }
        Strategy::RmiGlobalTopFraction => {
            let ranks = inputs.ranks.ok_or_else(|| missing(strategy, "rank records"))?;
            let mut all: Vec<&RankRecord> = ranks.iter().collect();
            all.sort_by(|a, b| b.rmi.total_cmp(&a.rmi).then_with(|| a.sample_id.cmp(&b.sample_id)));
            all.truncate(take_count(fraction, ranks.len()));
            Ok(from_ranks(all, ranks.len()))
        }
        Strategy::DiffHigh | Strategy::DiffLow => {
            let paired = inputs.paired.ok_or_else(|| missing(strategy, "paired ranks"))?;
            let tau = spec.tau;
            let mut chosen: Vec<&PairedRanks> = paired
                .iter()
                .filter(|p| {
                    if strategy == Strategy::DiffHigh {
                        p.diff > tau
                    } else {
                        p.diff < -tau
                    }
                })
                .collect();
            chosen.sort_by(|a, b| {
                let ord = a.diff.total_cmp(&b.diff);
                let ord = if strategy == Strategy::DiffHigh { ord.reverse() } else { ord };
                ord.then_with(|| a.sample_id.cmp(&b.sample_id))
            });
            Ok(from_pairs(chosen, paired.len()))
        }
        Strategy::SumHigh | Strategy::SumLow => {
            let paired = inputs.paired.ok_or_else(|| missing(strategy, "paired ranks"))?;
            let mut all: Vec<&PairedRanks> = paired.iter().collect();
            all.sort_by(|a, b| {
                let ord = a.sum.total_cmp(&b.sum);
                let ord = if strategy == Strategy::SumHigh { ord.reverse() } else { ord };
                ord.then_with(|| a.sample_id.cmp(&b.sample_id))
            });
            all.truncate(take_count(fraction, paired.len()));
            Ok(from_pairs(all, paired.len()))
        }
        Strategy::IfdClosestToOne => {
            let scores = inputs.scores.ok_or_else(|| missing(strategy, "score records"))?;
            let mut with_ifd: Vec<(&str, f64)> = scores
                .iter()
                .filter_map(|s| s.ifd.map(|v| (s.sample_id.as_str(), v)))
                .collect();
            let n = with_ifd.len();
            with_ifd.sort_by(|a, b| {
                (a.1 - 1.0)
                    .abs()
                    .total_cmp(&(b.1 - 1.0).abs())
                    .then_with(|| (a.1 > 1.0).cmp(&(b.1 > 1.0)))
                    .then_with(|| a.0.cmp(b.0))
            });
            with_ifd.truncate(take_count(fraction, n));
            Ok(Selection {
                ids: with_ifd.into_iter().map(|(id, _)| id.to_owned()).collect(),
                candidates: n,
            })
        }
        Strategy::Random => {
            let mut ids: Vec<&str> = if let Some(r) = inputs.ranks {
                r.iter().map(|r| r.sample_id.as_str()).collect()
            } else if let Some(p) = inputs.paired {
                p.iter().map(|p| p.sample_id.as_str()).collect()
            } else if let Some(s) = inputs.scores {
                s.iter().map(|s| s.sample_id.as_str()).collect()
            } else {
                return Err(missing(strategy, "ranks, pairs or scores"));
            };
            ids.sort_unstable();
            ids.dedup();
            let n = ids.len();
            let take = take_count(fraction, n);
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.unwrap_or(0));
            // Partial Fisher–Yates with u64 draws, identical on 32- and 64-bit targets.
            for i in 0..take {
                let j = i + rng.random_range(0..(n - i) as u64) as usize;
                ids.swap(i, j);
            }
            let mut chosen: Vec<String> = ids[..take].iter().map(|s| s.to_string()).collect();
            chosen.sort();
            Ok(Selection {
                ids: chosen,
                candidates: n,
            })
        }
    }
}

fn sort_rank_desc(v: &mut [&RankRecord]) {
    v.sort_by(|a, b| {
        b.normalized_rank
            .total_cmp(&a.normalized_rank)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
}

fn from_ranks(v: Vec<&RankRecord>, candidates: usize) -> Selection {
    Selection {
        ids: v.into_iter().map(|r| r.sample_id.clone()).collect(),
        candidates,
    }
}

fn from_pairs(v: Vec<&PairedRanks>, candidates: usize) -> Selection {
    Selection {
        ids: v.into_iter().map(|p| p.sample_id.clone()).collect(),
        candidates,
    }
}

pub const SELECTION_SCHEMA_VERSION: u32 = 1;

/// Provenance for one selection output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub schema_version: u32,
    pub spec: SelectionSpec,
    /// Input name → SHA-256 of the serialized input.
    pub input_digests: BTreeMap<String, String>,
    pub selected: usize,
    pub candidates: usize,
    pub realized_fraction: f64,
    /// Selected samples per stratification bin of `ranks`, when available.
    pub counts_per_bin: Vec<usize>,
    /// SHA-256 of the id list file.
    pub ids_digest: String,
}

impl SelectionManifest {
    pub fn new(
        spec: &SelectionSpec,
        selection: &Selection,
        ranks: Option<&[RankRecord]>,
        input_digests: BTreeMap<String, String>,
    ) -> Self {
        let counts_per_bin = ranks
            .map(|ranks| {
                let bins = ranks.iter().map(|r| r.bin + 1).max().unwrap_or(0);
                let bin_of: HashMap<&str, usize> =
                    ranks.iter().map(|r| (r.sample_id.as_str(), r.bin)).collect();
                let mut counts = vec![0; bins];
                for id in &selection.ids {
                    if let Some(&b) = bin_of.get(id.as_str()) {
                        counts[b] += 1;
                    }
                }
                counts
            })
            .unwrap_or_default();
        SelectionManifest {
            schema_version: SELECTION_SCHEMA_VERSION,
            spec: spec.clone(),
            input_digests,
            selected: selection.ids.len(),
            candidates: selection.candidates,
            realized_fraction: selection.realized_fraction(),
            counts_per_bin,
            ids_digest: sha256_hex(&ids_to_bytes(&selection.ids)),
        }
    }
}

pub fn ids_to_bytes(ids: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    for id in ids {
        out.extend_from_slice(id.as_bytes());
        out.push(b'\n');
    }
    out
}

/// `selection.txt` → `selection.manifest.json`
pub fn manifest_path_for(ids_path: &Path) -> PathBuf {
    ids_path.with_extension("manifest.json")
}

/// Write the id list and its manifest next to it.
pub fn write_selection(ids_path: &Path, ids: &[String], manifest: &SelectionManifest) -> Result<PathBuf> {
    jsonl::write_atomic(ids_path, &ids_to_bytes(ids))?;
    let manifest_path = manifest_path_for(ids_path);
    jsonl::write_atomic(&manifest_path, &jsonl::to_pretty(manifest)?)?;
    Ok(manifest_path)
}
