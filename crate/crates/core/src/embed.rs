//! Per-text token embeddings: storage, interchange import/export, and a
//! deterministic mock provider.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

use crate::corpus::{Dictionary, QueryAnalyses};
use crate::simscore::concat_texts;

/// Rows within this distance of unit norm are accepted (and renormalized).
pub const IMPORT_NORM_TOLERANCE: f64 = 1e-3;

/// Weight of the position-dependent component in mock vectors.
const MOCK_POSITION_WEIGHT: f64 = 0.3;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: schema violation: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("row {row} of {text_key} has norm {norm}, not unit length")]
    NotNormalized {
        text_key: String,
        row: usize,
        norm: f64,
    },
    #[error("mixed dimensions: store has {expected}, {text_key} has {found}")]
    MixedDims {
        text_key: String,
        expected: usize,
        found: usize,
    },
    #[error("mixed providers: store has {expected:?}, found {found:?}")]
    MixedProviders { expected: String, found: String },
    #[error("text is empty after trimming")]
    EmptyText,
    #[error("embedding dimension must be at least 2, got {0}")]
    DimTooSmall(usize),
    #[error("no embedding for text_key {0}")]
    Missing(String),
}

/// Stable key for a text: hex SHA-256 of its NFC normalization.
pub fn text_key(text: &str) -> String {
    let normalized: String = text.nfc().collect();
    hex::encode(Sha256::digest(normalized.as_bytes()))
}

/// Token strings with unit-norm row vectors for one text.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddingSeq {
    text_key: String,
    tokens: Vec<String>,
    dim: usize,
    vectors: Vec<f32>,
    sq_norms: Vec<f64>,
}

impl TokenEmbeddingSeq {
    /// `vectors` is row-major, `tokens.len()` rows of `dim` values.
    pub fn new(text_key: String, tokens: Vec<String>, dim: usize, vectors: Vec<f32>) -> Self {
        assert_eq!(tokens.len() * dim, vectors.len(), "token/vector shape mismatch");
        assert!(!tokens.is_empty(), "sequence must hold at least one token");
        let sq_norms = vectors
            .chunks_exact(dim)
            .map(|row| row.iter().map(|&x| f64::from(x) * f64::from(x)).sum())
            .collect();
        Self {
            text_key,
            tokens,
            dim,
            vectors,
            sq_norms,
        }
    }

    pub fn text_key(&self) -> &str {
        &self.text_key
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }

    /// Squared Euclidean norm of row `i`, accumulated in f64.
    pub fn sq_norm(&self, i: usize) -> f64 {
        self.sq_norms[i]
    }

    /// Reorder tokens (and their rows) by `order`, which must be a permutation.
    pub fn permuted(&self, order: &[usize]) -> Self {
        assert_eq!(order.len(), self.len());
        let tokens = order.iter().map(|&i| self.tokens[i].clone()).collect();
        let vectors = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self::new(self.text_key.clone(), tokens, self.dim, vectors)
    }
}

/// Tokenize by grapheme cluster, dropping whitespace-only clusters.
pub fn grapheme_tokens(text: &str) -> Vec<String> {
    let normalized: String = text.trim().nfc().collect();
    normalized
        .graphemes(true)
        .filter(|g| !g.chars().all(char::is_whitespace))
        .map(str::to_string)
        .collect()
}

fn seeded_rng(seed: u64, domain: &[u8], token: &str, position: Option<usize>) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain);
    h.update((token.len() as u64).to_le_bytes());
    h.update(token.as_bytes());
    if let Some(p) = position {
        h.update((p as u64).to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Deterministic stand-in for a transformer encoder.
///
/// Each token's vector mixes a component seeded by `(seed, token)` with a
/// smaller one seeded by `(seed, token, position)`, then is unit-normalized.
/// Repeated tokens therefore stay similar but not identical.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Result<TokenEmbeddingSeq, EmbedError> {
    if dim < 2 {
        return Err(EmbedError::DimTooSmall(dim));
    }
    let tokens = grapheme_tokens(text);
    if tokens.is_empty() {
        return Err(EmbedError::EmptyText);
    }
    let mut vectors = Vec::with_capacity(tokens.len() * dim);
    let mut row = vec![0f64; dim];
    for (pos, token) in tokens.iter().enumerate() {
        let mut base = seeded_rng(seed, b"token", token, None);
        let mut local = seeded_rng(seed, b"position", token, Some(pos));
        for x in row.iter_mut() {
            let b: f64 = StandardNormal.sample(&mut base);
            let l: f64 = StandardNormal.sample(&mut local);
            *x = b + MOCK_POSITION_WEIGHT * l;
        }
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        vectors.extend(row.iter().map(|x| (x / norm) as f32));
    }
    Ok(TokenEmbeddingSeq::new(text_key(text), tokens, dim, vectors))
}

/// Borrowed form of [`EmbeddingRecord`] used when writing; rows stay f32 so
/// they serialize with the shortest round-trip representation.
#[derive(Serialize)]
struct WireRecord<'a> {
    text_key: &'a str,
    text: &'a str,
    tokens: &'a [String],
    dim: usize,
    vectors: Vec<&'a [f32]>,
    provider: &'a str,
}

/// Wire record of the `.emb.jsonl` interchange format.
#[derive(Debug, Deserialize)]
struct EmbeddingRecord {
    text_key: String,
    text: String,
    tokens: Vec<String>,
    dim: usize,
    vectors: Vec<Vec<f64>>,
    provider: String,
}

/// Embeddings keyed by [`text_key`], all sharing one dimension and provider.
#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    provider_tag: String,
    seqs: BTreeMap<String, (String, TokenEmbeddingSeq)>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, provider_tag: impl Into<String>) -> Self {
        Self {
            dim,
            provider_tag: provider_tag.into(),
            seqs: BTreeMap::new(),
        }
    }

    /// Build a store by running [`mock_embed`] over `texts`.
    pub fn build_mock<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        dim: usize,
        seed: u64,
    ) -> Result<Self, EmbedError> {
        let mut store = Self::new(dim, format!("mock:dim={dim}:seed={seed}"));
        for text in texts {
            let key = text_key(text);
            if store.seqs.contains_key(&key) {
                continue;
            }
            let seq = mock_embed(text, dim, seed)?;
            store.seqs.insert(key, (text.to_string(), seq));
        }
        Ok(store)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.seqs.contains_key(key)
    }

    pub fn get(&self, key: &str) -> Option<&TokenEmbeddingSeq> {
        self.seqs.get(key).map(|(_, s)| s)
    }

    pub fn get_text(&self, text: &str) -> Result<&TokenEmbeddingSeq, EmbedError> {
        let key = text_key(text);
        self.get(&key).ok_or(EmbedError::Missing(key))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.seqs.keys().map(String::as_str)
    }

    pub fn insert(&mut self, text: &str, seq: TokenEmbeddingSeq) -> Result<(), EmbedError> {
        if seq.dim() != self.dim {
            return Err(EmbedError::MixedDims {
                text_key: seq.text_key().to_string(),
                expected: self.dim,
                found: seq.dim(),
            });
        }
        self.seqs
            .insert(seq.text_key().to_string(), (text.to_string(), seq));
        Ok(())
    }

    /// Write the store in `.emb.jsonl` form, sorted by text_key.
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (text, seq) in self.seqs.values() {
            let rec = WireRecord {
                text_key: seq.text_key(),
                text,
                tokens: seq.tokens(),
                dim: seq.dim(),
                vectors: seq.rows().collect(),
                provider: &self.provider_tag,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

/// Load an `.emb.jsonl` interchange file.
pub fn import_embeddings(path: &Path) -> Result<EmbeddingStore, EmbedError> {
    let io_err = |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    };
    let schema = |line: usize, message: String| EmbedError::Schema {
        path: path.to_path_buf(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut store: Option<EmbeddingStore> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord =
            serde_json::from_str(&line).map_err(|e| schema(lineno, e.to_string()))?;
        if text_key(&rec.text) != rec.text_key {
            return Err(schema(
                lineno,
                format!("text_key {} does not match its text", rec.text_key),
            ));
        }
        if rec.tokens.is_empty() {
            return Err(schema(lineno, "record has no tokens".into()));
        }
        if rec.tokens.len() != rec.vectors.len() {
            return Err(schema(
                lineno,
                format!(
                    "{} tokens but {} vectors",
                    rec.tokens.len(),
                    rec.vectors.len()
                ),
            ));
        }
        let store = store.get_or_insert_with(|| EmbeddingStore::new(rec.dim, rec.provider.clone()));
        if rec.dim != store.dim {
            return Err(EmbedError::MixedDims {
                text_key: rec.text_key,
                expected: store.dim,
                found: rec.dim,
            });
        }
        if rec.provider != store.provider_tag {
            return Err(EmbedError::MixedProviders {
                expected: store.provider_tag.clone(),
                found: rec.provider,
            });
        }
        if store.contains_key(&rec.text_key) {
            return Err(schema(lineno, format!("duplicate text_key {}", rec.text_key)));
        }
        let mut flat = Vec::with_capacity(rec.dim * rec.vectors.len());
        for (row_idx, row) in rec.vectors.iter().enumerate() {
            if row.len() != rec.dim {
                return Err(EmbedError::MixedDims {
                    text_key: rec.text_key,
                    expected: rec.dim,
                    found: row.len(),
                });
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > IMPORT_NORM_TOLERANCE {
                return Err(EmbedError::NotNormalized {
                    text_key: rec.text_key,
                    row: row_idx,
                    norm,
                });
            }
            if (norm - 1.0).abs() > 1e-6 {
                flat.extend(row.iter().map(|x| (x / norm) as f32));
            } else {
                flat.extend(row.iter().map(|&x| x as f32));
            }
        }
        let seq = TokenEmbeddingSeq::new(rec.text_key, rec.tokens, rec.dim, flat);
        store.insert(&rec.text, seq)?;
    }
    store.ok_or_else(|| schema(0, "file holds no records".into()))
}

/// Every text the matcher and evaluator may look up, deduplicated by key,
/// in order of first appearance: per entry `a_rad`, `a_pic`, `a_joint`,
/// `a_rad ⊕ a_joint`, then the same four per query.
pub fn required_texts(dict: &Dictionary, queries: &[QueryAnalyses]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |t: String| {
        if seen.insert(text_key(&t)) {
            out.push(t);
        }
    };
    for e in dict.entries() {
        push(e.radical_analysis.clone());
        push(e.pictographic_analysis.clone());
        push(e.joint_analysis.clone());
        push(concat_texts(&e.radical_analysis, &e.joint_analysis));
    }
    for q in queries {
        push(q.radical_analysis.clone());
        push(q.pictographic_analysis.clone());
        push(q.joint_analysis.clone());
        push(concat_texts(&q.radical_analysis, &q.joint_analysis));
    }
    out
}

/// Keys of required texts that the store lacks. Empty means fully offline.
pub fn ensure_coverage(
    store: &EmbeddingStore,
    dict: &Dictionary,
    queries: &[QueryAnalyses],
) -> Vec<String> {
    required_texts(dict, queries)
        .iter()
        .map(|t| text_key(t))
        .filter(|k| !store.contains_key(k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_dictionary, load_queries};

    fn fixtures() -> (Dictionary, Vec<QueryAnalyses>) {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
        (
            load_dictionary(&root.join("dictionary.jsonl")).unwrap(),
            load_queries(&root.join("queries.jsonl")).unwrap(),
        )
    }

    #[test]
    fn text_key_is_nfc_stable() {
        assert_eq!(text_key("水"), text_key("水"));
        assert_eq!(text_key("e\u{301}"), text_key("\u{e9}"));
        assert_ne!(text_key("x\ny"), text_key("y\nx"));
    }

    #[test]
    fn fixture_texts_have_distinct_keys() {
        let (dict, queries) = fixtures();
        let texts: BTreeSet<String> = required_texts(&dict, &queries).into_iter().collect();
        let keys: BTreeSet<String> = texts.iter().map(|t| text_key(t)).collect();
        assert_eq!(texts.len(), keys.len());
    }

    #[test]
    fn mock_embed_is_deterministic() {
        let a = mock_embed("水", 8, 0).unwrap();
        let b = mock_embed("水", 8, 0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, mock_embed("水", 8, 1).unwrap());
        assert_eq!(mock_embed("水木日", 8, 0).unwrap().len(), 3);
    }

    #[test]
    fn mock_embed_rejects_empty_and_tiny_dim() {
        assert!(matches!(mock_embed("  \n ", 8, 0), Err(EmbedError::EmptyText)));
        assert!(matches!(mock_embed("水", 1, 0), Err(EmbedError::DimTooSmall(1))));
    }

    #[test]
    fn mock_rows_are_unit_norm() {
        use rand::{RngExt, SeedableRng};
        let alphabet: Vec<char> = "水木日人山川火土金石口手心目耳abcXYZ".chars().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let len = rng.random_range(1..12);
            let text: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            let seq = mock_embed(&text, 16, 3).unwrap();
            for row in seq.rows() {
                let n = row.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6, "norm {n}");
            }
        }
    }

    #[test]
    fn distinct_fixture_tokens_are_not_parallel() {
        let (dict, queries) = fixtures();
        let mut vocab = BTreeSet::new();
        for t in required_texts(&dict, &queries) {
            vocab.extend(grapheme_tokens(&t));
        }
        let vecs: Vec<Vec<f64>> = vocab
            .iter()
            .map(|t| {
                mock_embed(t, 16, 7).unwrap().row(0).iter().map(|&x| f64::from(x)).collect()
            })
            .collect();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let c: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                assert!(c.abs() < 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn write_then_import_round_trips() {
        let (dict, queries) = fixtures();
        let texts = required_texts(&dict, &queries);
        let store = EmbeddingStore::build_mock(texts.iter().map(String::as_str), 16, 7).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        store.write(f.path()).unwrap();
        let back = import_embeddings(f.path()).unwrap();
        assert_eq!(back.len(), texts.len());
        assert_eq!(back.provider_tag(), store.provider_tag());
        for k in store.keys() {
            assert_eq!(back.get(k), store.get(k));
        }
        assert!(ensure_coverage(&back, &dict, &queries).is_empty());
    }

    fn record(text: &str, dim: usize, rows: Vec<Vec<f64>>) -> String {
        let tokens: Vec<String> = (0..rows.len()).map(|i| format!("t{i}")).collect();
        serde_json::json!({
            "text_key": text_key(text), "text": text, "tokens": tokens,
            "dim": dim, "vectors": rows, "provider": "test"
        })
        .to_string()
    }

    fn write_file(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn import_rejects_mixed_dims() {
        let mut a = vec![0.0; 768];
        a[0] = 1.0;
        let mut b = vec![0.0; 384];
        b[0] = 1.0;
        let f = write_file(&[record("a", 768, vec![a]), record("b", 384, vec![b])]);
        assert!(matches!(
            import_embeddings(f.path()),
            Err(EmbedError::MixedDims { expected: 768, found: 384, .. })
        ));
    }

    #[test]
    fn import_rejects_short_rows_naming_key() {
        let f = write_file(&[record("half", 2, vec![vec![0.5, 0.0]])]);
        match import_embeddings(f.path()) {
            Err(EmbedError::NotNormalized { text_key: k, .. }) => assert_eq!(k, text_key("half")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn import_renormalizes_near_unit_rows() {
        let f = write_file(&[record("near", 2, vec![vec![1.0005, 0.0]])]);
        let store = import_embeddings(f.path()).unwrap();
        let seq = store.get_text("near").unwrap();
        assert_eq!(seq.row(0), &[1.0f32, 0.0]);
    }

    #[test]
    fn import_rejects_key_mismatch_and_shape() {
        let bad_key = serde_json::json!({
            "text_key": "deadbeef", "text": "x", "tokens": ["x"],
            "dim": 2, "vectors": [[1.0, 0.0]], "provider": "p"
        })
        .to_string();
        assert!(matches!(
            import_embeddings(write_file(&[bad_key]).path()),
            Err(EmbedError::Schema { .. })
        ));
        let mismatch = serde_json::json!({
            "text_key": text_key("x"), "text": "x", "tokens": ["x", "y"],
            "dim": 2, "vectors": [[1.0, 0.0]], "provider": "p"
        })
        .to_string();
        assert!(matches!(
            import_embeddings(write_file(&[mismatch]).path()),
            Err(EmbedError::Schema { .. })
        ));
    }

    #[test]
    fn coverage_reports_missing_pic_and_query_keys() {
        let (dict, queries) = fixtures();
        let dict_texts = required_texts(&dict, &[]);
        let all_texts = required_texts(&dict, &queries);

        let full = EmbeddingStore::build_mock(all_texts.iter().map(String::as_str), 8, 0).unwrap();
        assert!(ensure_coverage(&full, &dict, &queries).is_empty());

        let missing_pic = &dict.entry(4).pictographic_analysis;
        let partial = EmbeddingStore::build_mock(
            all_texts.iter().map(String::as_str).filter(|t| t != missing_pic),
            8,
            0,
        )
        .unwrap();
        assert_eq!(
            ensure_coverage(&partial, &dict, &queries),
            vec![text_key(missing_pic)]
        );

        let dict_only = EmbeddingStore::build_mock(dict_texts.iter().map(String::as_str), 8, 0).unwrap();
        let dict_keys: BTreeSet<String> = dict_texts.iter().map(|t| text_key(t)).collect();
        let expected: BTreeSet<String> = all_texts
            .iter()
            .map(|t| text_key(t))
            .filter(|k| !dict_keys.contains(k))
            .collect();
        let got: BTreeSet<String> = ensure_coverage(&dict_only, &dict, &queries).into_iter().collect();
        assert_eq!(got, expected);
        assert!(!got.is_empty());
    }
}
