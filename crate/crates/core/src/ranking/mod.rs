//! Stratified RMI ranks and strong/weak disagreement.
//!
//! Samples are sorted by PPL(Q) and cut into K contiguous bins whose sizes
//! differ by at most one. Inside bin k a sample's normalized rank is
//! `rank / |B_k|`, with rank |B_k| for the highest RMI. Every tie is broken by
//! sample id so the output is a pure function of the inputs.

pub mod select;

pub use select::{
    select, write_selection, Selection, SelectionInputs, SelectionManifest, SelectionSpec,
    Strategy, DEFAULT_K, DEFAULT_TAU,
};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoreRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub sample_id: String,
    pub model_id: String,
    pub bin: usize,
    pub within_bin_rank: usize,
    pub bin_size: usize,
    /// within_bin_rank / bin_size, in (0, 1].
    pub normalized_rank: f64,
    pub ppl_q: f64,
    pub rmi: f64,
}

impl RankRecord {
    /// Decile 1..=10 of the normalized rank: decile d holds ranks in
    /// ((d−1)/10, d/10].
    pub fn decile(&self) -> usize {
        (10 * self.within_bin_rank).div_ceil(self.bin_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRanks {
    pub sample_id: String,
    pub r_s: f64,
    pub r_w: f64,
    /// r_s − r_w
    pub diff: f64,
    /// r_s + r_w
    pub sum: f64,
}

/// Bin membership: `bins[k]` lists indices into the scored records, in
/// ascending (PPL(Q), sample id) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratification {
    pub k: usize,
    pub bins: Vec<Vec<usize>>,
    /// Records left out because they carry no PPL(Q) or RMI.
    pub excluded: usize,
}

impl Stratification {
    pub fn bin_sizes(&self) -> Vec<usize> {
        self.bins.iter().map(Vec::len).collect()
    }

    /// Bin index per rankable record index.
    pub fn assignment(&self) -> BTreeMap<usize, usize> {
        self.bins
            .iter()
            .enumerate()
            .flat_map(|(k, members)| members.iter().map(move |&i| (i, k)))
            .collect()
    }
}

fn by_value_then_id(a: (f64, &str), b: (f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

/// Partition rankable records into `k` PPL(Q) bins.
pub fn stratify(scores: &[ScoreRecord], k: usize) -> Result<Stratification> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| scores[i].is_rankable())
        .collect();
    let excluded = scores.len() - order.len();
    if k > order.len() {
        return Err(Error::Config(format!(
            "K = {k} bins exceeds the {} rankable samples",
            order.len()
        )));
    }
    crate::corpus::check_unique_ids(order.iter().map(|&i| scores[i].sample_id.as_str()))?;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&scores[a], &scores[b]);
        by_value_then_id(
            (ra.ppl_q.expect("rankable"), &ra.sample_id),
            (rb.ppl_q.expect("rankable"), &rb.sample_id),
        )
    });
    let n = order.len();
    let (base, extra) = (n / k, n % k);
    let mut bins = Vec::with_capacity(k);
    let mut rest = order.as_slice();
    for b in 0..k {
        let size = base + usize::from(b < extra);
        let (head, tail) = rest.split_at(size);
        bins.push(head.to_vec());
        rest = tail;
    }
    Ok(Stratification { k, bins, excluded })
}

/// Rank RMI inside each bin (ascending, so the highest RMI gets rank |B_k|).
pub fn rank_within_bins(scores: &[ScoreRecord], strat: &Stratification) -> Vec<RankRecord> {
    let mut out = Vec::with_capacity(strat.bins.iter().map(Vec::len).sum());
    for (bin, members) in strat.bins.iter().enumerate() {
        let mut sorted = members.clone();
        sorted.sort_by(|&a, &b| {
            let (ra, rb) = (&scores[a], &scores[b]);
            by_value_then_id(
                (ra.rmi.expect("rankable"), &ra.sample_id),
                (rb.rmi.expect("rankable"), &rb.sample_id),
            )
        });
        let size = sorted.len();
        for (pos, &i) in sorted.iter().enumerate() {
            let r = &scores[i];
            let rank = pos + 1;
            out.push(RankRecord {
                sample_id: r.sample_id.clone(),
                model_id: r.model_id.clone(),
                bin,
                within_bin_rank: rank,
                bin_size: size,
                normalized_rank: rank as f64 / size as f64,
                ppl_q: r.ppl_q.expect("rankable"),
                rmi: r.rmi.expect("rankable"),
            });
        }
    }
    out
}

/// Stratify then rank.
pub fn rank(scores: &[ScoreRecord], k: usize) -> Result<(Vec<RankRecord>, Stratification)> {
    let strat = stratify(scores, k)?;
    Ok((rank_within_bins(scores, &strat), strat))
}

/// Join strong and weak ranks by sample id; output sorted by id.
pub fn pair_ranks(strong: &[RankRecord], weak: &[RankRecord]) -> Result<Vec<PairedRanks>> {
    let weak_by_id: BTreeMap<&str, &RankRecord> =
        weak.iter().map(|r| (r.sample_id.as_str(), r)).collect();
    let strong_ids: BTreeSet<&str> = strong.iter().map(|r| r.sample_id.as_str()).collect();
    let mut missing: Vec<String> = strong_ids
        .iter()
        .filter(|id| !weak_by_id.contains_key(*id))
        .map(|id| format!("{id} (weak)"))
        .collect();
    missing.extend(
        weak_by_id
            .keys()
            .filter(|id| !strong_ids.contains(*id))
            .map(|id| format!("{id} (strong)")),
    );
    if !missing.is_empty() {
        return Err(Error::IdMismatch { missing });
    }
    let mut out: Vec<PairedRanks> = strong
        .iter()
        .map(|s| {
            let w = weak_by_id[s.sample_id.as_str()];
            PairedRanks {
                sample_id: s.sample_id.clone(),
                r_s: s.normalized_rank,
                r_w: w.normalized_rank,
                diff: s.normalized_rank - w.normalized_rank,
                sum: s.normalized_rank + w.normalized_rank,
            }
        })
        .collect();
    out.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(out)
}
