//! Append-only perplexity cache keyed by (sample, model, template variant).
//!
//! On disk every line is one JSON object. Perplexities are decimal strings in
//! shortest round-trip form, so values survive persistence bit-exactly.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::templating::{Direction, TemplateVariant};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub sample_id: String,
    pub model_id: String,
    pub template_variant: TemplateVariant,
}

impl CacheKey {
    pub fn new(sample_id: &str, model_id: &str, template_variant: TemplateVariant) -> Self {
        CacheKey {
            sample_id: sample_id.to_owned(),
            model_id: model_id.to_owned(),
            template_variant,
        }
    }

    /// Stable textual form, also used to derive request ids and replay keys.
    pub fn to_key_string(&self) -> String {
        format!(
            "{}|{}|{}",
            self.sample_id,
            self.model_id,
            self.template_variant.as_str()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCacheEntry {
    pub sample_id: String,
    pub model_id: String,
    pub template_variant: TemplateVariant,
    #[serde(default, with = "decimal")]
    pub ppl_q: Option<f64>,
    #[serde(default, with = "decimal")]
    pub ppl_q_given_a: Option<f64>,
    #[serde(default, with = "decimal")]
    pub ppl_a: Option<f64>,
    #[serde(default, with = "decimal")]
    pub ppl_a_given_q: Option<f64>,
    /// Target-span token counts echoed by the backend, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_tokens: Option<usize>,
}

impl ScoreCacheEntry {
    pub fn empty(key: &CacheKey) -> Self {
        ScoreCacheEntry {
            sample_id: key.sample_id.clone(),
            model_id: key.model_id.clone(),
            template_variant: key.template_variant,
            ppl_q: None,
            ppl_q_given_a: None,
            ppl_a: None,
            ppl_a_given_q: None,
            query_tokens: None,
            answer_tokens: None,
        }
    }

    pub fn key(&self) -> CacheKey {
        CacheKey::new(&self.sample_id, &self.model_id, self.template_variant)
    }

    pub fn get(&self, direction: Direction) -> Option<f64> {
        match direction {
            Direction::QUnconditional => self.ppl_q,
            Direction::QGivenA => self.ppl_q_given_a,
            Direction::AUnconditional => self.ppl_a,
            Direction::AGivenQ => self.ppl_a_given_q,
        }
    }

    pub fn set(&mut self, direction: Direction, ppl: f64) {
        let slot = match direction {
            Direction::QUnconditional => &mut self.ppl_q,
            Direction::QGivenA => &mut self.ppl_q_given_a,
            Direction::AUnconditional => &mut self.ppl_a,
            Direction::AGivenQ => &mut self.ppl_a_given_q,
        };
        *slot = Some(ppl);
    }

    pub fn validate(&self, normalization: Normalization) -> Result<()> {
        let present: Vec<(Direction, f64)> = Direction::ALL
            .iter()
            .filter_map(|&d| self.get(d).map(|v| (d, v)))
            .collect();
        if present.is_empty() {
            return Err(Error::Validation(format!(
                "cache entry for `{}` carries no perplexity",
                self.sample_id
            )));
        }
        for (direction, value) in present {
            if !value.is_finite() || value <= 0.0 {
                return Err(Error::Validation(format!(
                    "perplexity {} for `{}` is {value}, expected a finite positive number",
                    direction.as_str(),
                    self.sample_id
                )));
            }
            if normalization == Normalization::Probabilities && value < 1.0 {
                return Err(Error::Validation(format!(
                    "perplexity {} for `{}` is {value} < 1 under a normalized backend",
                    direction.as_str(),
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// Whether the producing backend emits true (normalized) log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    Probabilities,
    Unnormalized,
}

impl Normalization {
    pub fn from_flag(normalized: bool) -> Self {
        if normalized {
            Normalization::Probabilities
        } else {
            Normalization::Unnormalized
        }
    }
}

/// Concurrent reads, serialized appends. Writers hold the file lock while
/// updating the map, so map state always matches file order.
pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, ScoreCacheEntry>>,
    writer: Mutex<Option<File>>,
    corrupted: usize,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        ScoreCache {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            corrupted: 0,
        }
    }

    /// Open (creating if needed) the cache file at `path`. Corrupted lines are
    /// logged and skipped; later lines win over earlier ones.
    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut corrupted = 0;
        if path.exists() {
            let bytes = jsonl::read_bytes(path)?;
            for (n, raw) in bytes.split(|&b| b == b'\n').enumerate() {
                if raw.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                match serde_json::from_slice::<ScoreCacheEntry>(raw) {
                    Ok(entry) if entry.validate(Normalization::Unnormalized).is_ok() => {
                        entries.insert(entry.key(), entry);
                    }
                    _ => {
                        corrupted += 1;
                        log::warn!("{}: ignoring corrupted cache line {}", path.display(), n + 1);
                    }
                }
            }
        } else if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = open_append(path)?;
        Ok(ScoreCache {
            path: Some(path.to_owned()),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
            corrupted,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Number of lines skipped as unreadable when the cache was opened.
    pub fn corrupted_lines(&self) -> usize {
        self.corrupted
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<ScoreCacheEntry> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .cloned()
    }

    pub fn put(&self, entry: ScoreCacheEntry, normalization: Normalization) -> Result<()> {
        entry.validate(normalization)?;
        let mut line = serde_json::to_vec(&entry)?;
        line.push(b'\n');
        let mut writer = self.writer.lock().expect("cache lock poisoned");
        if let Some(file) = writer.as_mut() {
            let path = self.path.as_deref().unwrap_or(Path::new("<cache>"));
            file.write_all(&line).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
        }
        self.entries
            .write()
            .expect("cache lock poisoned")
            .insert(entry.key(), entry);
        Ok(())
    }

    /// All entries in key order.
    pub fn entries(&self) -> Vec<ScoreCacheEntry> {
        let map = self.entries.read().expect("cache lock poisoned");
        let mut out: Vec<ScoreCacheEntry> = map.values().cloned().collect();
        out.sort_by_key(|e| e.key());
        out
    }

    /// Rewrite the backing file with one line per key (last writer wins),
    /// in key order. Returns the number of entries kept.
    pub fn compact(&self) -> Result<usize> {
        let mut writer = self.writer.lock().expect("cache lock poisoned");
        let entries = self.entries();
        if let Some(path) = &self.path {
            jsonl::write_atomic(path, &jsonl::to_bytes(&entries)?)?;
            *writer = Some(open_append(path)?);
        }
        Ok(entries.len())
    }
}

fn open_append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

mod decimal {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => s.serialize_str(&v.to_string()),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        raw.map(|s| s.parse::<f64>().map_err(serde::de::Error::custom))
            .transpose()
    }
}
