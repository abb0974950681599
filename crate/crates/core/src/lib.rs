//! Reverse mutual information (RMI) scoring and selection for instruction-tuning corpora.
//!
//! RMI(Q, A) = ln PPL(Q) − ln PPL(Q|A) measures how much an answer reduces the
//! uncertainty of its query. Samples are stratified by PPL(Q), ranked by RMI
//! inside each stratum, and selected either by rank range or by the
//! disagreement between a strong and a weak scoring model.
//!
//! The crate is organised by pipeline stage:
//!
//! - [`corpus`]: JSONL ingest, length filtering and the persistent score cache
//! - [`templating`]: chat-formatted contexts for every perplexity direction
//! - [`scoring`]: backends, perplexity, RMI and IFD
//! - [`ranking`]: stratification, within-bin ranks, pairing and selection
//! - [`analysis`]: correlations, overlaps and plot-ready summaries
//! - [`defectlab`]: synthetic corpora with planted defects
//! - [`pipeline`]: resumable end-to-end runs

pub mod analysis;
pub mod corpus;
pub mod defectlab;
pub mod digest;
pub mod error;
pub mod jsonl;
pub mod pipeline;
pub mod ranking;
pub mod scoring;
pub mod templating;

pub use error::{Error, Result};
