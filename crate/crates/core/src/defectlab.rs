//! Synthetic corpora with planted defects and per-mode separation metrics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Sample};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::ranking;
use crate::scoring::ScoreRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectMode {
    Clean,
    /// The answer opens by repeating the query.
    KeywordEcho,
    /// Query and answer come from different topics.
    Misalignment,
    /// The query is a greeting, not a task.
    OffTopicQuery,
}

impl DefectMode {
    pub const ALL: [DefectMode; 4] = [
        DefectMode::Clean,
        DefectMode::KeywordEcho,
        DefectMode::Misalignment,
        DefectMode::OffTopicQuery,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DefectMode::Clean => "clean",
            DefectMode::KeywordEcho => "keyword_echo",
            DefectMode::Misalignment => "misalignment",
            DefectMode::OffTopicQuery => "off_topic_query",
        }
    }
}

impl fmt::Display for DefectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        DefectMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown defect mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRate {
    pub mode: DefectMode,
    pub rate: f64,
}

fn default_topics() -> usize {
    8
}
fn default_query_len() -> [usize; 2] {
    [6, 10]
}
fn default_answer_len() -> [usize; 2] {
    [18, 30]
}
fn default_prefix() -> String {
    "dl".to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub mix: Vec<ModeRate>,
    pub seed: u64,
    /// Word list split into `topics` equal partitions; the built-in list when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary: Option<Vec<String>>,
    #[serde(default = "default_topics")]
    pub topics: usize,
    /// Inclusive word-count range for queries.
    #[serde(default = "default_query_len")]
    pub query_len: [usize; 2],
    /// Inclusive word-count range for answers.
    #[serde(default = "default_answer_len")]
    pub answer_len: [usize; 2],
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

impl DefectSpec {
    /// Equal rates over `modes`.
    pub fn uniform(modes: &[DefectMode], seed: u64) -> Self {
        let rate = 1.0 / modes.len() as f64;
        DefectSpec {
            mix: modes.iter().map(|&mode| ModeRate { mode, rate }).collect(),
            seed,
            vocabulary: None,
            topics: default_topics(),
            query_len: default_query_len(),
            answer_len: default_answer_len(),
            id_prefix: default_prefix(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("defect spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("defect spec: {e}")))
        } else {
            Self::from_toml(&text)
        }
    }

    fn topic_words(&self) -> Vec<Vec<String>> {
        let words: Vec<String> = match &self.vocabulary {
            Some(v) => v.clone(),
            None => BUILTIN_VOCABULARY.split_whitespace().map(str::to_owned).collect(),
        };
        let per = words.len() / self.topics.max(1);
        words
            .chunks(per.max(1))
            .take(self.topics)
            .map(<[String]>::to_vec)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mix.is_empty() {
            return Err(Error::Config("defect mix is empty".into()));
        }
        if self.mix.iter().any(|m| !(m.rate.is_finite() && m.rate >= 0.0)) {
            return Err(Error::Config("defect rates must be finite and non-negative".into()));
        }
        let total: f64 = self.mix.iter().map(|m| m.rate).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("defect rates sum to {total}, not 1")));
        }
        for (name, [lo, hi]) in [("query_len", self.query_len), ("answer_len", self.answer_len)] {
            if lo == 0 || lo > hi {
                return Err(Error::Config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.answer_len[0] < self.query_len[1] {
            return Err(Error::Config(
                "answer_len minimum must be at least the query_len maximum (echo answers restate the query)".into(),
            ));
        }
        let needs_two = self.mix.iter().any(|m| m.mode == DefectMode::Misalignment && m.rate > 0.0);
        if self.topics == 0 || (needs_two && self.topics < 2) {
            return Err(Error::Config("misalignment needs at least two topics".into()));
        }
        let total_words = self
            .vocabulary
            .as_ref()
            .map(Vec::len)
            .unwrap_or_else(|| BUILTIN_VOCABULARY.split_whitespace().count());
        let per_topic = total_words / self.topics;
        if per_topic < self.query_len[1] {
            return Err(Error::Config(format!(
                "vocabulary too small: {total_words} words over {} topics gives {per_topic} per topic, \
                 queries need {} distinct words",
                self.topics, self.query_len[1]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectLabel {
    pub id: String,
    pub mode: DefectMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub samples: Vec<Sample>,
    pub labels: Vec<DefectLabel>,
}

/// Split `n` by `rates` with the largest-remainder method; ties go to the earlier entry.
pub fn apportion(rates: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = rates.iter().sum();
    let quotas: Vec<f64> = rates.iter().map(|r| r / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

const GREETINGS: [&str; 8] = [
    "Hi!",
    "Hello!",
    "Hey there!",
    "Hi, how are you?",
    "Good morning!",
    "Thanks!",
    "Hello, anyone here?",
    "Hi again!",
];

fn draw_distinct<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], k: usize) -> Vec<&'a str> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..k {
        let j = i + rng.random_range(0..(idx.len() - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx[..k].iter().map(|&i| pool[i].as_str()).collect()
}

fn draw_with_replacement<'a>(rng: &mut ChaCha8Rng, pool: &'a [String], k: usize) -> Vec<&'a str> {
    (0..k)
        .map(|_| pool[rng.random_range(0..pool.len() as u64) as usize].as_str())
        .collect()
}

fn len_in(rng: &mut ChaCha8Rng, [lo, hi]: [usize; 2]) -> usize {
    lo + rng.random_range(0..=(hi - lo) as u64) as usize
}

fn contains_run(hay: &[&str], needle: &[&str]) -> bool {
    needle.len() > 1 && hay.windows(needle.len()).any(|w| w == needle)
}

/// Generate `n` labeled samples. Output is a pure function of `(spec, n)`.
pub fn generate_corpus(spec: &DefectSpec, n: usize) -> Result<GeneratedCorpus> {
    if n == 0 {
        return Err(Error::Precondition("n must be at least 1".into()));
    }
    spec.validate()?;
    let topics = spec.topic_words();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let rates: Vec<f64> = spec.mix.iter().map(|m| m.rate).collect();
    let mut modes = Vec::with_capacity(n);
    for (m, count) in spec.mix.iter().zip(apportion(&rates, n)) {
        modes.extend(std::iter::repeat_n(m.mode, count));
    }
    for i in (1..modes.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        modes.swap(i, j);
    }

    let width = n.to_string().len().max(4);
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, mode) in modes.into_iter().enumerate() {
        let id = format!("{}-{:0width$}", spec.id_prefix, i);
        let topic = rng.random_range(0..topics.len() as u64) as usize;
        let own = &topics[topic];
        let qlen = len_in(&mut rng, spec.query_len);
        let alen = len_in(&mut rng, spec.answer_len);
        let qwords = draw_distinct(&mut rng, own, qlen);
        let (query, answer) = match mode {
            DefectMode::Clean => {
                let mut a = draw_with_replacement(&mut rng, own, alen);
                // shares topical words with the query, never the query itself
                while contains_run(&a, &qwords) || !a.iter().any(|w| qwords.contains(w)) {
                    a = draw_with_replacement(&mut rng, own, alen);
                }
                (qwords.join(" "), a.join(" "))
            }
            DefectMode::KeywordEcho => {
                let mut a = qwords.clone();
                a.extend(draw_with_replacement(&mut rng, own, alen - qlen));
                (qwords.join(" "), a.join(" "))
            }
            DefectMode::Misalignment => {
                let shift = 1 + rng.random_range(0..(topics.len() - 1) as u64) as usize;
                let other = &topics[(topic + shift) % topics.len()];
                (qwords.join(" "), draw_with_replacement(&mut rng, other, alen).join(" "))
            }
            DefectMode::OffTopicQuery => {
                let g = GREETINGS[rng.random_range(0..GREETINGS.len() as u64) as usize];
                (g.to_owned(), draw_with_replacement(&mut rng, own, alen).join(" "))
            }
        };
        samples.push(Sample::new(id.clone(), query, answer));
        labels.push(DefectLabel { id, mode });
    }
    Ok(GeneratedCorpus { samples, labels })
}

/// `corpus.jsonl` → `corpus.labels.jsonl`
pub fn labels_path_for(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("labels.jsonl")
}

/// Write the corpus and its sibling labels file; returns the labels path.
pub fn write_generated(corpus_path: &Path, generated: &GeneratedCorpus) -> Result<PathBuf> {
    corpus::write_corpus(corpus_path, &generated.samples)?;
    let labels = labels_path_for(corpus_path);
    jsonl::write_atomic(&labels, &jsonl::to_bytes(&generated.labels)?)?;
    Ok(labels)
}

pub fn read_labels(path: &Path) -> Result<Vec<DefectLabel>> {
    jsonl::read(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: DefectMode,
    pub count: usize,
    /// Samples of this mode without an RMI (failed scoring).
    pub unranked: usize,
    pub rmi_mean: Option<f64>,
    pub rmi_median: Option<f64>,
    pub rmi_min: Option<f64>,
    pub rmi_max: Option<f64>,
    /// Fraction of ranked samples in each stratified decile, lowest first.
    pub decile_occupancy: [f64; 10],
    /// Fraction of ranked samples in deciles 9 and 10.
    pub top2_fraction: f64,
    /// Fraction of ranked samples in deciles 1 and 2.
    pub bottom2_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub k: usize,
    pub modes: Vec<ModeSummary>,
    pub all: ModeSummaryAll,
}

/// Whole-corpus summary, same fields as a mode summary without the mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummaryAll {
    pub count: usize,
    pub rmi_median: Option<f64>,
    pub decile_occupancy: [f64; 10],
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

fn occupancy(deciles: &[usize]) -> [f64; 10] {
    let mut out = [0.0; 10];
    if deciles.is_empty() {
        return out;
    }
    for &d in deciles {
        out[d - 1] += 1.0;
    }
    for v in &mut out {
        *v /= deciles.len() as f64;
    }
    out
}

/// Per-mode RMI summary and stratified decile placement. Every scored sample must be labeled.
pub fn separation_metrics(
    scores: &[ScoreRecord],
    labels: &[DefectLabel],
    k: usize,
) -> Result<SeparationReport> {
    let label_of: HashMap<&str, DefectMode> =
        labels.iter().map(|l| (l.id.as_str(), l.mode)).collect();
    let unlabeled: Vec<String> = scores
        .iter()
        .filter(|s| !label_of.contains_key(s.sample_id.as_str()))
        .map(|s| s.sample_id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(Error::Validation(format!(
            "{} scored samples have no label: {}",
            unlabeled.len(),
            unlabeled.iter().take(5).cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    let (ranks, _) = ranking::rank(scores, k)?;
    let decile_of: HashMap<&str, usize> =
        ranks.iter().map(|r| (r.sample_id.as_str(), r.decile())).collect();

    #[derive(Default)]
    struct Acc {
        count: usize,
        rmi: Vec<f64>,
        deciles: Vec<usize>,
    }
    let mut per: BTreeMap<DefectMode, Acc> = BTreeMap::new();
    let mut all_deciles = Vec::new();
    let mut all_rmi = Vec::new();
    for s in scores {
        let acc = per.entry(label_of[s.sample_id.as_str()]).or_default();
        acc.count += 1;
        if let (Some(rmi), Some(&d)) = (s.rmi, decile_of.get(s.sample_id.as_str())) {
            acc.rmi.push(rmi);
            acc.deciles.push(d);
            all_rmi.push(rmi);
            all_deciles.push(d);
        }
    }
    let modes = per
        .into_iter()
        .map(|(mode, acc)| {
            let occ = occupancy(&acc.deciles);
            let n = acc.rmi.len();
            ModeSummary {
                mode,
                count: acc.count,
                unranked: acc.count - n,
                rmi_mean: (n > 0).then(|| acc.rmi.iter().sum::<f64>() / n as f64),
                rmi_median: median(&acc.rmi),
                rmi_min: acc.rmi.iter().copied().reduce(f64::min),
                rmi_max: acc.rmi.iter().copied().reduce(f64::max),
                decile_occupancy: occ,
                top2_fraction: fraction_where(&acc.deciles, |d| d >= 9),
                bottom2_fraction: fraction_where(&acc.deciles, |d| d <= 2),
            }
        })
        .collect();
    Ok(SeparationReport {
        k,
        modes,
        all: ModeSummaryAll {
            count: scores.len(),
            rmi_median: median(&all_rmi),
            decile_occupancy: occupancy(&all_deciles),
        },
    })
}

fn fraction_where(deciles: &[usize], f: impl Fn(usize) -> bool) -> f64 {
    if deciles.is_empty() {
        0.0
    } else {
        deciles.iter().filter(|&&d| f(d)).count() as f64 / deciles.len() as f64
    }
}

impl SeparationReport {
    pub fn mode(&self, mode: DefectMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

/// Computer-science terms, 30 per topic, eight topics.
pub const BUILTIN_VOCABULARY: &str = "
array list stack queue heap tree graph node edge vertex hash bucket trie matrix vector tuple deque pointer index slice buffer ring bitmap bloom filter segment fenwick cursor cell link
sort search merge quick binary linear greedy dynamic recursion memo partition pivot traverse depth breadth shortest path spanning prune backtrack heuristic knapsack interval sweep window prefix suffix dijkstra kruskal topological
thread mutex lock atomic channel future promise async await spawn barrier semaphore condvar deadlock race fence yield scheduler executor pool worker task coroutine actor message contention spinlock rwlock livelock starvation
socket packet router protocol header payload latency bandwidth handshake tcp udp http request response cookie session proxy gateway firewall dns port certificate tls cipher websocket stream frame retry timeout backoff
table column row query join schema transaction commit rollback isolation replica shard cluster foreign key constraint view trigger procedure sql orm migration snapshot vacuum btree wal tuplestore planner predicate aggregate
compiler parser lexer token grammar syntax semantic ast bytecode interpreter register allocation inline optimize unroll constant folding dead elimination linker loader symbol relocation assembly opcode ir ssa phi dominator codegen
kernel process memory page virtual paging cache miss swap interrupt syscall driver filesystem inode block device mmap fork exec signal pipe permission privilege context switch tlb dma firmware boot userspace
neural network layer weight bias gradient descent loss epoch batch tensor activation relu softmax dropout embedding attention transformer encoder decoder optimizer adam learning rate regularization overfitting validation inference checkpointing backprop
";
