//! Radical-pictographic dual matching.
//!
//! Two candidate branches are scored against the dictionary and merged:
//!
//! 1. **Filtered**: entries sharing the predicted radical, ranked by the
//!    similarity of their pictographic analysis to the query's.
//! 2. **Joint**: every entry, ranked by the similarity of
//!    `radical_analysis ⊕ joint_analysis` on both sides.
//!
//! The union is reranked by raw score (an entry found by both branches keeps
//! its higher score) and the top `k` labels are returned.
//!
//! Ordering is total: score descending, then filtered/both before joint, then
//! ascending entry ordinal. Scoring runs on the ambient rayon pool; results are
//! collected in ordinal order, so the degree of parallelism never changes output.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{DictEntry, Dictionary, QueryAnalyses};
use crate::embed::{text_key, EmbedError, EmbeddingStore, TokenEmbeddingSeq};
use crate::simscore::{bert_score, concat_texts, ScoreAggregate, ScoreError};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("no dictionary entry has radical {0:?}")]
    EmptyRadicalBucket(String),
    #[error("no candidates")]
    NoCandidates,
    #[error("k must be at least 1")]
    InvalidK,
}

/// What the filtered branch does when no entry carries the predicted radical.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadicalFallback {
    Error,
    WholeDictionary,
    #[default]
    JointOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub k: usize,
    pub radical_fallback: RadicalFallback,
    pub dedup_labels: bool,
    pub aggregate: ScoreAggregate,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            radical_fallback: RadicalFallback::default(),
            dedup_labels: true,
            aggregate: ScoreAggregate::default(),
        }
    }
}

impl MatchConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), MatchError> {
        if self.k == 0 {
            return Err(MatchError::InvalidK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Filtered,
    Joint,
    Both,
}

impl Branch {
    /// Tie-break rank: radical-consistent evidence sorts first.
    fn priority(self) -> u8 {
        match self {
            Branch::Filtered | Branch::Both => 0,
            Branch::Joint => 1,
        }
    }
}

/// One scored entry from a single branch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    #[serde(skip)]
    pub ordinal: usize,
    pub entry_id: String,
    pub label: String,
    pub branch: Branch,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    #[serde(skip)]
    pub ordinal: usize,
    pub entry_id: String,
    pub label: String,
    pub branch: Branch,
    pub score: f64,
    pub rank: usize,
}

/// Output of one matching branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub candidates: Vec<ScoredCandidate>,
    /// Number of entries the branch scored before truncation.
    pub pool_size: usize,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchTrace {
    pub query_id: String,
    pub c1: Vec<ScoredCandidate>,
    pub c2: Vec<ScoredCandidate>,
    pub merged: Vec<RankedCandidate>,
    pub radical_bucket_size: usize,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decipherment {
    pub labels: Vec<String>,
    pub trace: MatchTrace,
}

fn candidate_order(a_score: f64, a_branch: Branch, a_ord: usize, b_score: f64, b_branch: Branch, b_ord: usize) -> Ordering {
    b_score
        .total_cmp(&a_score)
        .then(a_branch.priority().cmp(&b_branch.priority()))
        .then(a_ord.cmp(&b_ord))
}

fn lookup<'s>(store: &'s EmbeddingStore, text: &str) -> Result<&'s TokenEmbeddingSeq, MatchError> {
    let key = text_key(text);
    store
        .get(&key)
        .ok_or(MatchError::Embedding(EmbedError::Missing(key)))
}

/// Score `ordinals` in parallel, returning scores in the same order.
fn score_entries<F>(
    dict: &Dictionary,
    ordinals: &[usize],
    store: &EmbeddingStore,
    query: &TokenEmbeddingSeq,
    aggregate: ScoreAggregate,
    entry_text: F,
) -> Result<Vec<f64>, MatchError>
where
    F: Fn(&DictEntry) -> String + Sync,
{
    ordinals
        .par_iter()
        .map(|&o| {
            let seq = lookup(store, &entry_text(dict.entry(o)))?;
            Ok(aggregate.pick(&bert_score(seq, query)?))
        })
        .collect()
}

fn top_k(
    dict: &Dictionary,
    ordinals: &[usize],
    scores: Vec<f64>,
    branch: Branch,
    k: usize,
) -> Vec<ScoredCandidate> {
    let mut scored: Vec<(usize, f64)> = ordinals.iter().copied().zip(scores).collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
        .into_iter()
        .map(|(ordinal, score)| {
            let e = dict.entry(ordinal);
            ScoredCandidate {
                ordinal,
                entry_id: e.entry_id.clone(),
                label: e.label.clone(),
                branch,
                score,
            }
        })
        .collect()
}

/// Top-k entries within the predicted radical's bucket by pictographic similarity.
pub fn filtered_matching(
    query: &QueryAnalyses,
    dict: &Dictionary,
    store: &EmbeddingStore,
    cfg: &MatchConfig,
) -> Result<BranchOutput, MatchError> {
    cfg.check()?;
    let bucket = dict.radical_bucket(&query.radical_pred);
    let all: Vec<usize>;
    let (ordinals, fallback_used) = if bucket.is_empty() {
        match cfg.radical_fallback {
            RadicalFallback::Error => {
                return Err(MatchError::EmptyRadicalBucket(query.radical_pred.clone()))
            }
            RadicalFallback::JointOnly => {
                return Ok(BranchOutput {
                    candidates: Vec::new(),
                    pool_size: 0,
                    fallback_used: true,
                })
            }
            RadicalFallback::WholeDictionary => {
                all = (0..dict.len()).collect();
                (all.as_slice(), true)
            }
        }
    } else {
        (bucket, false)
    };
    let q = lookup(store, &query.pictographic_analysis)?;
    let scores = score_entries(dict, ordinals, store, q, cfg.aggregate, |e| {
        e.pictographic_analysis.clone()
    })?;
    Ok(BranchOutput {
        candidates: top_k(dict, ordinals, scores, Branch::Filtered, cfg.k),
        pool_size: if fallback_used { 0 } else { bucket.len() },
        fallback_used,
    })
}

/// Top-k entries over the whole dictionary by similarity of the
/// concatenated radical and joint analyses.
pub fn joint_matching(
    query: &QueryAnalyses,
    dict: &Dictionary,
    store: &EmbeddingStore,
    cfg: &MatchConfig,
) -> Result<BranchOutput, MatchError> {
    cfg.check()?;
    let q = lookup(
        store,
        &concat_texts(&query.radical_analysis, &query.joint_analysis),
    )?;
    let ordinals: Vec<usize> = (0..dict.len()).collect();
    let scores = score_entries(dict, &ordinals, store, q, cfg.aggregate, |e| {
        concat_texts(&e.radical_analysis, &e.joint_analysis)
    })?;
    Ok(BranchOutput {
        candidates: top_k(dict, &ordinals, scores, Branch::Joint, cfg.k),
        pool_size: dict.len(),
        fallback_used: false,
    })
}

/// Union both branches, keep the higher score for shared entries, and rank.
pub fn merge_rerank(
    c1: &[ScoredCandidate],
    c2: &[ScoredCandidate],
    cfg: &MatchConfig,
) -> Result<Vec<RankedCandidate>, MatchError> {
    cfg.check()?;
    if c1.is_empty() && c2.is_empty() {
        return Err(MatchError::NoCandidates);
    }
    let mut pool: BTreeMap<usize, ScoredCandidate> = BTreeMap::new();
    for c in c1.iter().chain(c2) {
        match pool.get_mut(&c.ordinal) {
            Some(existing) => {
                if existing.branch != c.branch {
                    existing.branch = Branch::Both;
                }
                existing.score = existing.score.max(c.score);
            }
            None => {
                pool.insert(c.ordinal, c.clone());
            }
        }
    }
    let mut merged: Vec<ScoredCandidate> = pool.into_values().collect();
    merged.sort_by(|a, b| candidate_order(a.score, a.branch, a.ordinal, b.score, b.branch, b.ordinal));

    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cfg.k);
    for c in merged {
        if out.len() == cfg.k {
            break;
        }
        if cfg.dedup_labels && !seen.insert(c.label.clone()) {
            continue;
        }
        out.push(RankedCandidate {
            ordinal: c.ordinal,
            entry_id: c.entry_id,
            label: c.label,
            branch: c.branch,
            score: c.score,
            rank: out.len() + 1,
        });
    }
    Ok(out)
}

/// Run both branches and merge them into the final top-k labels.
pub fn decipher(
    query: &QueryAnalyses,
    dict: &Dictionary,
    store: &EmbeddingStore,
    cfg: &MatchConfig,
) -> Result<Decipherment, MatchError> {
    let filtered = filtered_matching(query, dict, store, cfg)?;
    let joint = joint_matching(query, dict, store, cfg)?;
    let merged = merge_rerank(&filtered.candidates, &joint.candidates, cfg)?;
    Ok(Decipherment {
        labels: merged.iter().map(|c| c.label.clone()).collect(),
        trace: MatchTrace {
            query_id: query.query_id.clone(),
            c1: filtered.candidates,
            c2: joint.candidates,
            merged,
            radical_bucket_size: filtered.pool_size,
            fallback_used: filtered.fallback_used,
        },
    })
}

/// One line of a `.result.jsonl` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecipherRecord {
    pub query_id: String,
    pub labels: Vec<String>,
    pub candidates: Vec<RankedCandidate>,
    pub fallback_used: bool,
}

impl From<&Decipherment> for DecipherRecord {
    fn from(d: &Decipherment) -> Self {
        Self {
            query_id: d.trace.query_id.clone(),
            labels: d.labels.clone(),
            candidates: d.trace.merged.clone(),
            fallback_used: d.trace.fallback_used,
        }
    }
}

pub fn write_results(path: &Path, records: &[DecipherRecord]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_results(path: &Path) -> std::io::Result<Vec<DecipherRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}
