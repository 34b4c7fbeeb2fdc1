//! Character–pictograph analysis dictionary and query fixtures.
//!
//! Both files are UTF-8 JSON Lines, one record per line. Blank lines are
//! skipped but still count toward the reported line numbers.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: no entries")]
    Empty { path: PathBuf },
    #[error("duplicate entry_id {entry_id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        entry_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("invalid dictionary: {0}")]
    Invalid(ValidationReport),
    #[error("invalid query {query_id:?}: {field} is empty")]
    InvalidQuery { query_id: String, field: &'static str },
    #[error("scale subset removed all entries")]
    EmptySubset,
    #[error("allowed label set is empty")]
    NoAllowedLabels,
}

/// Trim and NFC-normalize a tag or label.
pub fn normalize_tag(s: &str) -> String {
    s.trim().nfc().collect()
}

/// One dictionary record: a character label with its radical tag and the
/// three analysis texts describing its glyph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DictEntry {
    pub entry_id: String,
    pub label: String,
    pub radical: String,
    pub radical_analysis: String,
    pub pictographic_analysis: String,
    pub joint_analysis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_refs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sources: Option<Vec<String>>,
}

impl DictEntry {
    fn normalize(&mut self) {
        self.entry_id = self.entry_id.trim().to_string();
        self.label = normalize_tag(&self.label);
        self.radical = normalize_tag(&self.radical);
    }

    fn blank_fields(&self) -> impl Iterator<Item = &'static str> + '_ {
        [
            ("entry_id", &self.entry_id),
            ("label", &self.label),
            ("radical", &self.radical),
            ("radical_analysis", &self.radical_analysis),
            ("pictographic_analysis", &self.pictographic_analysis),
            ("joint_analysis", &self.joint_analysis),
        ]
        .into_iter()
        .filter(|(_, v)| v.trim().is_empty())
        .map(|(name, _)| name)
    }
}

/// The four intermediate analysis results for one test character.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnalyses {
    pub query_id: String,
    pub radical_pred: String,
    pub radical_analysis: String,
    pub pictographic_analysis: String,
    pub joint_analysis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

impl QueryAnalyses {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let fields = [
            ("radical_pred", &self.radical_pred),
            ("radical_analysis", &self.radical_analysis),
            ("pictographic_analysis", &self.pictographic_analysis),
            ("joint_analysis", &self.joint_analysis),
        ];
        for (field, value) in fields {
            if value.trim().is_empty() {
                return Err(CorpusError::InvalidQuery {
                    query_id: self.query_id.clone(),
                    field,
                });
            }
        }
        Ok(())
    }

    fn normalize(&mut self) {
        self.radical_pred = normalize_tag(&self.radical_pred);
        if let Some(g) = &mut self.gold_label {
            *g = normalize_tag(g);
        }
    }
}

/// A single invariant violation found by [`validate_dictionary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub entry_id: String,
    pub rule: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.entry_id, v.rule)?;
        }
        Ok(())
    }
}

/// An immutable, indexed dictionary. Entry ordinals follow file order.
#[derive(Debug, Clone)]
pub struct Dictionary {
    entries: Vec<DictEntry>,
    radical_index: BTreeMap<String, Vec<usize>>,
    label_index: BTreeMap<String, Vec<usize>>,
}

impl Dictionary {
    /// Build indexes over `entries` without checking record invariants.
    /// Use [`validate_dictionary`] to inspect the result.
    pub fn from_entries(mut entries: Vec<DictEntry>) -> Self {
        let mut radical_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut label_index: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (ordinal, entry) in entries.iter_mut().enumerate() {
            entry.normalize();
            radical_index
                .entry(entry.radical.clone())
                .or_default()
                .push(ordinal);
            label_index
                .entry(entry.label.clone())
                .or_default()
                .push(ordinal);
        }
        Self {
            entries,
            radical_index,
            label_index,
        }
    }

    pub fn entries(&self) -> &[DictEntry] {
        &self.entries
    }

    pub fn entry(&self, ordinal: usize) -> &DictEntry {
        &self.entries[ordinal]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn radical_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.radical_index
    }

    pub fn label_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.label_index
    }

    /// Ordinals of entries tagged with `radical`, in file order.
    pub fn radical_bucket(&self, radical: &str) -> &[usize] {
        self.radical_index
            .get(radical)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Ordinals of entries labelled `label`, in file order.
    pub fn entries_for_label(&self, label: &str) -> &[usize] {
        self.label_index.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn radical_count(&self) -> usize {
        self.radical_index.len()
    }

    pub fn label_count(&self) -> usize {
        self.label_index.len()
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.label_index.keys().cloned().collect()
    }
}

/// Records of a JSON Lines file paired with their 1-based line numbers.
fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    Ok(out)
}

/// Parse a dictionary file into line-numbered entries without checking
/// record invariants beyond the JSON schema and entry_id uniqueness.
pub fn read_dictionary_records(path: &Path) -> Result<Vec<(usize, DictEntry)>, CorpusError> {
    let records: Vec<(usize, DictEntry)> = read_jsonl(path)?;
    if records.is_empty() {
        return Err(CorpusError::Empty {
            path: path.to_path_buf(),
        });
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (line, entry) in &records {
        if let Some(first_line) = seen.insert(entry.entry_id.trim(), *line) {
            return Err(CorpusError::DuplicateId {
                entry_id: entry.entry_id.clone(),
                first_line,
                second_line: *line,
            });
        }
    }
    Ok(records)
}

/// Load and validate a dictionary file.
pub fn load_dictionary(path: &Path) -> Result<Dictionary, CorpusError> {
    let records = read_dictionary_records(path)?;
    let dict = Dictionary::from_entries(records.into_iter().map(|(_, e)| e).collect());
    let report = validate_dictionary(&dict);
    if !report.is_clean() {
        return Err(CorpusError::Invalid(report));
    }
    Ok(dict)
}

pub fn write_dictionary(dict: &Dictionary, path: &Path) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for entry in dict.entries() {
        serde_json::to_writer(&mut w, entry)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Load a query fixture file. Every record must carry non-empty analyses.
pub fn load_queries(path: &Path) -> Result<Vec<QueryAnalyses>, CorpusError> {
    let records: Vec<(usize, QueryAnalyses)> = read_jsonl(path)?;
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, mut q) in records {
        q.normalize();
        q.validate()?;
        if let Some(first_line) = seen.insert(q.query_id.clone(), line) {
            return Err(CorpusError::DuplicateId {
                entry_id: q.query_id,
                first_line,
                second_line: line,
            });
        }
        out.push(q);
    }
    Ok(out)
}

/// Check every entry and index invariant. Violations are returned as data.
pub fn validate_dictionary(dict: &Dictionary) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (ordinal, entry) in dict.entries().iter().enumerate() {
        let id = if entry.entry_id.is_empty() {
            format!("#{}", ordinal + 1)
        } else {
            entry.entry_id.clone()
        };
        for field in entry.blank_fields() {
            violations.push(Violation {
                entry_id: id.clone(),
                rule: format!("{field} must be non-empty"),
            });
        }
        if let Some(prev) = seen.insert(entry.entry_id.as_str(), ordinal) {
            violations.push(Violation {
                entry_id: id.clone(),
                rule: format!("entry_id duplicates entry #{}", prev + 1),
            });
        }
    }

    let mut bucket_of = vec![0usize; dict.len()];
    for ordinals in dict.radical_index().values() {
        for &o in ordinals {
            if o < bucket_of.len() {
                bucket_of[o] += 1;
            }
        }
    }
    for (ordinal, count) in bucket_of.into_iter().enumerate() {
        if count != 1 {
            violations.push(Violation {
                entry_id: dict.entry(ordinal).entry_id.clone(),
                rule: format!("appears in {count} radical buckets, expected 1"),
            });
        }
    }
    ValidationReport { violations }
}

/// Restrict `dict` to the entries whose label is in `allowed_labels`.
pub fn subset_by_scale(
    dict: &Dictionary,
    allowed_labels: &BTreeSet<String>,
) -> Result<Dictionary, CorpusError> {
    if allowed_labels.is_empty() {
        return Err(CorpusError::NoAllowedLabels);
    }
    let allowed: BTreeSet<String> = allowed_labels.iter().map(|l| normalize_tag(l)).collect();
    let entries: Vec<DictEntry> = dict
        .entries()
        .iter()
        .filter(|e| allowed.contains(&e.label))
        .cloned()
        .collect();
    if entries.is_empty() {
        return Err(CorpusError::EmptySubset);
    }
    Ok(Dictionary::from_entries(entries))
}

/// Read a label list: one label per line, blank lines and `#` comments ignored.
pub fn load_label_set(path: &Path) -> Result<BTreeSet<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text
        .lines()
        .map(normalize_tag)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect())
}
