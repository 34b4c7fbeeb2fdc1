//! Evaluation protocol: class splits, top-k accuracy, mean analysis
//! BERT-Score, top-k and dictionary-scale sweeps, and report output.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{subset_by_scale, CorpusError, Dictionary, QueryAnalyses};
use crate::embed::EmbeddingStore;
use crate::matcher::{decipher, MatchConfig, MatchError};
use crate::simscore::{bert_score, ScoreError};

/// Top-k settings of the supplementary sweep.
pub const SWEEP_KS: [usize; 5] = [1, 5, 10, 50, 100];
/// Headline top-k columns.
pub const HEADLINE_KS: [usize; 2] = [1, 10];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need more than {needed} classes, got {available}")]
    TooFewClasses { needed: usize, available: usize },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("no result for query {0:?}")]
    MissingResult(String),
    #[error("query {0:?} has no gold label")]
    NoGold(String),
    #[error("gold label {label:?} of query {query_id:?} is not in the dictionary")]
    UnresolvedGold { query_id: String, label: String },
    #[error("nothing to evaluate")]
    Empty,
    #[error("ks must be non-empty and positive")]
    BadKs,
    #[error("query {query_id}: {source}")]
    Match {
        query_id: String,
        #[source]
        source: MatchError,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embedding(#[from] crate::embed::EmbedError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub zero_shot_class_count: usize,
    /// `(train, val)` parts of the remaining classes.
    pub train_val_ratio: (u32, u32),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            zero_shot_class_count: 200,
            train_val_ratio: (9, 1),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub zero_shot: Vec<String>,
}

/// Hold out `zero_shot_class_count` classes by seeded shuffle and split the
/// rest by ratio. Input order does not matter; duplicates collapse.
pub fn split_classes(labels: &[String], spec: &SplitSpec) -> Result<ClassSplit, EvalError> {
    let (t, v) = spec.train_val_ratio;
    if spec.zero_shot_class_count == 0 || t == 0 || v == 0 {
        return Err(EvalError::InvalidSpec(
            "counts and ratio parts must be positive".into(),
        ));
    }
    let mut classes: Vec<String> = labels
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if classes.len() <= spec.zero_shot_class_count {
        return Err(EvalError::TooFewClasses {
            needed: spec.zero_shot_class_count,
            available: classes.len(),
        });
    }
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let rest = classes.split_off(spec.zero_shot_class_count);
    let parts = u64::from(t) + u64::from(v);
    let n_val = ((rest.len() as u64 * u64::from(v) + parts / 2) / parts) as usize;
    let n_train = rest.len() - n_val;
    let mut train = rest;
    let val = train.split_off(n_train);
    Ok(ClassSplit {
        train,
        val,
        zero_shot: classes,
    })
}

/// 1-based position of the first occurrence of `gold`.
pub fn gold_rank(labels: &[String], gold: &str) -> Option<usize> {
    labels.iter().position(|l| l == gold).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: String,
    pub gold: String,
    pub gold_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopkOutcome {
    pub ks: Vec<usize>,
    pub accuracy: BTreeMap<usize, f64>,
    pub per_query: Vec<QueryOutcome>,
}

fn check_ks(ks: &[usize]) -> Result<Vec<usize>, EvalError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::BadKs);
    }
    Ok(ks.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
}

fn accuracy_from_ranks(per_query: &[QueryOutcome], ks: &[usize]) -> BTreeMap<usize, f64> {
    let n = per_query.len() as f64;
    ks.iter()
        .map(|&k| {
            let hits = per_query
                .iter()
                .filter(|q| q.gold_rank.is_some_and(|r| r <= k))
                .count();
            (k, hits as f64 / n)
        })
        .collect()
}

/// Fraction of queries whose gold label appears within the first `k` labels,
/// for each `k`. `gold` fixes the query order of the outcome.
pub fn topk_accuracy(
    results: &HashMap<String, Vec<String>>,
    gold: &[(String, String)],
    ks: &[usize],
) -> Result<TopkOutcome, EvalError> {
    let ks = check_ks(ks)?;
    if gold.is_empty() {
        return Err(EvalError::Empty);
    }
    let per_query = gold
        .iter()
        .map(|(qid, g)| {
            let labels = results
                .get(qid)
                .ok_or_else(|| EvalError::MissingResult(qid.clone()))?;
            Ok(QueryOutcome {
                query_id: qid.clone(),
                gold: g.clone(),
                gold_rank: gold_rank(labels, g),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    Ok(TopkOutcome {
        accuracy: accuracy_from_ranks(&per_query, &ks),
        ks,
        per_query,
    })
}

/// Which analysis fields enter the mean analysis BERT-Score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BertScoreFields {
    #[default]
    All,
    Radical,
    Pictographic,
    Joint,
}

fn gold_of(q: &QueryAnalyses) -> Result<&str, EvalError> {
    q.gold_label
        .as_deref()
        .ok_or_else(|| EvalError::NoGold(q.query_id.clone()))
}

/// Mean BERT-Score F1 between predicted analyses and the gold entry's texts.
///
/// The gold entry is the first dictionary entry carrying the gold label.
pub fn mean_analysis_bertscore(
    predicted: &[QueryAnalyses],
    dict: &Dictionary,
    store: &EmbeddingStore,
    fields: BertScoreFields,
) -> Result<f64, EvalError> {
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = 0.0;
    for q in predicted {
        let label = gold_of(q)?;
        let &ordinal = dict
            .entries_for_label(label)
            .first()
            .ok_or_else(|| EvalError::UnresolvedGold {
                query_id: q.query_id.clone(),
                label: label.to_string(),
            })?;
        let e = dict.entry(ordinal);
        let pairs: Vec<(&str, &str)> = match fields {
            BertScoreFields::All => vec![
                (&q.radical_analysis, &e.radical_analysis),
                (&q.pictographic_analysis, &e.pictographic_analysis),
                (&q.joint_analysis, &e.joint_analysis),
            ],
            BertScoreFields::Radical => vec![(&q.radical_analysis, &e.radical_analysis)],
            BertScoreFields::Pictographic => {
                vec![(&q.pictographic_analysis, &e.pictographic_analysis)]
            }
            BertScoreFields::Joint => vec![(&q.joint_analysis, &e.joint_analysis)],
        };
        let mut sum = 0.0;
        for (pred, reference) in &pairs {
            sum += bert_score(store.get_text(pred)?, store.get_text(reference)?)?.f1;
        }
        total += sum / pairs.len() as f64;
    }
    Ok(total / predicted.len() as f64)
}

/// Decipher every query once at `max(ks)` and read accuracy at each `k` from
/// the prefix of the ranked labels.
pub fn sweep_topk(
    queries: &[QueryAnalyses],
    dict: &Dictionary,
    store: &EmbeddingStore,
    cfg: &MatchConfig,
    ks: &[usize],
) -> Result<TopkOutcome, EvalError> {
    let ks = check_ks(ks)?;
    let k_max = *ks.last().expect("non-empty");
    let cfg = MatchConfig { k: k_max, ..*cfg };
    let mut results = HashMap::new();
    let mut gold = Vec::with_capacity(queries.len());
    for q in queries {
        gold.push((q.query_id.clone(), gold_of(q)?.to_string()));
        let out = decipher(q, dict, store, &cfg).map_err(|source| EvalError::Match {
            query_id: q.query_id.clone(),
            source,
        })?;
        results.insert(q.query_id.clone(), out.labels);
    }
    topk_accuracy(&results, &gold, &ks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScaleQueryOutcome {
    pub query_id: String,
    pub gold: String,
    pub gold_rank: Option<usize>,
    pub gold_excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleRow {
    pub name: String,
    pub n_entries: usize,
    pub n_labels: usize,
    pub accuracy: BTreeMap<usize, f64>,
    pub gold_excluded: usize,
    pub per_query: Vec<ScaleQueryOutcome>,
}

/// Run the top-k evaluation against each named label subset of `dict`.
pub fn sweep_dictionary_scale(
    queries: &[QueryAnalyses],
    dict: &Dictionary,
    store: &EmbeddingStore,
    cfg: &MatchConfig,
    label_sets: &[(String, BTreeSet<String>)],
    ks: &[usize],
) -> Result<Vec<ScaleRow>, EvalError> {
    let mut rows = Vec::with_capacity(label_sets.len());
    for (name, labels) in label_sets {
        let sub = subset_by_scale(dict, labels)?;
        let outcome = sweep_topk(queries, &sub, store, cfg, ks)?;
        let per_query: Vec<ScaleQueryOutcome> = outcome
            .per_query
            .into_iter()
            .map(|q| ScaleQueryOutcome {
                gold_excluded: sub.entries_for_label(&q.gold).is_empty(),
                query_id: q.query_id,
                gold: q.gold,
                gold_rank: q.gold_rank,
            })
            .collect();
        rows.push(ScaleRow {
            name: name.clone(),
            n_entries: sub.len(),
            n_labels: sub.label_count(),
            accuracy: outcome.accuracy,
            gold_excluded: per_query.iter().filter(|q| q.gold_excluded).count(),
            per_query,
        });
    }
    Ok(rows)
}

/// Machine-readable evaluation report (`.report.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub accuracy: BTreeMap<usize, f64>,
    pub mean_bertscore: f64,
    pub n_queries: usize,
    pub per_query: Vec<QueryOutcome>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(outcome: TopkOutcome, mean_bertscore: f64, config: serde_json::Value) -> Self {
        Self {
            n_queries: outcome.per_query.len(),
            ks: outcome.ks,
            accuracy: outcome.accuracy,
            mean_bertscore,
            per_query: outcome.per_query,
            config,
        }
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// One-row table with a column per k, in percent.
pub fn render_accuracy_table(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<12}", "");
    for k in &report.ks {
        let _ = write!(out, "{:>9}", format!("Top-{k}"));
    }
    out.push('\n');
    let _ = write!(out, "{:<12}", "accuracy");
    for k in &report.ks {
        let _ = write!(out, "{:>9}", pct(report.accuracy[k]));
    }
    out.push('\n');
    let _ = writeln!(out, "{:<12}{:>9}", "BERT-Score", pct(report.mean_bertscore));
    let _ = writeln!(out, "{:<12}{:>9}", "queries", report.n_queries);
    out
}

/// One row per k.
pub fn render_topk_grid(outcome: &TopkOutcome) -> String {
    let mut out = format!("{:<10}{:>9}\n", "@Top-k", "acc (%)");
    for (k, acc) in &outcome.accuracy {
        let _ = writeln!(out, "{:<10}{:>9}", format!("Top-{k}"), pct(*acc));
    }
    out
}

/// One row per dictionary scale, one column per k.
pub fn render_scale_grid(rows: &[ScaleRow]) -> String {
    let ks: Vec<usize> = rows
        .first()
        .map(|r| r.accuracy.keys().copied().collect())
        .unwrap_or_default();
    let mut out = format!("{:<16}{:>9}{:>9}", "@Dict. Scale", "entries", "labels");
    for k in &ks {
        let _ = write!(out, "{:>9}", format!("Top-{k}"));
    }
    let _ = writeln!(out, "{:>10}", "excluded");
    for r in rows {
        let _ = write!(out, "{:<16}{:>9}{:>9}", r.name, r.n_entries, r.n_labels);
        for k in &ks {
            let _ = write!(out, "{:>9}", pct(r.accuracy[k]));
        }
        let _ = writeln!(out, "{:>10}", r.gold_excluded);
    }
    out
}
