//! Token-level BERT-Score: greedy cosine matching between two embedded texts.
//!
//! No IDF weighting, no baseline rescaling. Negative cosines are kept.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::TokenEmbeddingSeq;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SimilarityScore {
    pub fn from_precision_recall(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Which scalar of a [`SimilarityScore`] is used for ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreAggregate {
    #[default]
    F1,
    Precision,
    Recall,
}

impl ScoreAggregate {
    pub fn pick(self, s: &SimilarityScore) -> f64 {
        match self {
            ScoreAggregate::F1 => s.f1,
            ScoreAggregate::Precision => s.precision,
            ScoreAggregate::Recall => s.recall,
        }
    }
}

/// Dense row-major `rows × cols` matrix of cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Cosine between row `i` of `a` and row `j` of `b`.
///
/// Rows are unit-norm, but dividing by `sqrt(|a|² |b|²)` makes identical
/// rows score exactly 1.0 in floating point.
#[inline]
fn cosine(a: &TokenEmbeddingSeq, i: usize, b: &TokenEmbeddingSeq, j: usize) -> f64 {
    let dot: f64 = a
        .row(i)
        .iter()
        .zip(b.row(j))
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    let denom = (a.sq_norm(i) * b.sq_norm(j)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (dot / denom).clamp(-1.0, 1.0)
}

fn check_dims(a: &TokenEmbeddingSeq, b: &TokenEmbeddingSeq) -> Result<(), ScoreError> {
    if a.dim() != b.dim() {
        return Err(ScoreError::DimMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

pub fn cosine_matrix(a: &TokenEmbeddingSeq, b: &TokenEmbeddingSeq) -> Result<SimMatrix, ScoreError> {
    check_dims(a, b)?;
    let mut data = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            data.push(cosine(a, i, b, j));
        }
    }
    Ok(SimMatrix {
        rows: a.len(),
        cols: b.len(),
        data,
    })
}

/// Greedy-matching precision/recall/F1 of `candidate` against `reference`.
pub fn bert_score(
    candidate: &TokenEmbeddingSeq,
    reference: &TokenEmbeddingSeq,
) -> Result<SimilarityScore, ScoreError> {
    check_dims(candidate, reference)?;
    let mut ref_best = vec![f64::NEG_INFINITY; reference.len()];
    let mut precision_sum = 0.0;
    for i in 0..candidate.len() {
        let mut best = f64::NEG_INFINITY;
        for (j, rb) in ref_best.iter_mut().enumerate() {
            let c = cosine(candidate, i, reference, j);
            best = best.max(c);
            *rb = rb.max(c);
        }
        precision_sum += best;
    }
    let precision = precision_sum / candidate.len() as f64;
    let recall = ref_best.iter().sum::<f64>() / reference.len() as f64;
    Ok(SimilarityScore::from_precision_recall(precision, recall))
}

/// Join two analysis texts with a single newline.
pub fn concat_texts(a: &str, b: &str) -> String {
    let mut s = String::with_capacity(a.len() + b.len() + 1);
    s.push_str(a);
    s.push('\n');
    s.push_str(b);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{mock_embed, text_key};
    use proptest::prelude::*;

    fn seq(rows: &[&[f32]]) -> TokenEmbeddingSeq {
        let dim = rows[0].len();
        let tokens = (0..rows.len()).map(|i| format!("t{i}")).collect();
        let flat = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TokenEmbeddingSeq::new("k".into(), tokens, dim, flat)
    }

    #[test]
    fn cosine_identity_and_orthogonal() {
        let a = seq(&[&[0.6, 0.8]]);
        assert_eq!(cosine_matrix(&a, &a).unwrap().data, vec![1.0]);
        let b = seq(&[&[0.8, -0.6]]);
        assert_eq!(cosine_matrix(&a, &b).unwrap().data, vec![0.0]);
    }

    #[test]
    fn cosine_matrix_two_by_three() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let a = seq(&[&[1.0, 0.0, 0.0], &[0.0, s, s]]);
        let b = seq(&[&[0.0, 1.0, 0.0], &[s, 0.0, s], &[0.6, 0.0, 0.8]]);
        let m = cosine_matrix(&a, &b).unwrap();
        assert_eq!((m.rows, m.cols), (2, 3));
        for i in 0..2 {
            for j in 0..3 {
                let direct: f64 = a
                    .row(i)
                    .iter()
                    .zip(b.row(j))
                    .map(|(&x, &y)| f64::from(x) * f64::from(y))
                    .sum();
                assert!((m.get(i, j) - direct).abs() < 1e-6, "({i},{j})");
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = seq(&[&[1.0, 0.0]]);
        let b = seq(&[&[1.0, 0.0, 0.0]]);
        assert_eq!(
            bert_score(&a, &b),
            Err(ScoreError::DimMismatch { left: 2, right: 3 })
        );
        assert!(cosine_matrix(&a, &b).is_err());
    }

    #[test]
    fn identical_sequences_score_one() {
        let a = mock_embed("部首水象流水之形", 16, 3).unwrap();
        let s = bert_score(&a, &a).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn orthogonal_vocabularies_score_zero() {
        let a = seq(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let b = seq(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
        assert_eq!(bert_score(&a, &b).unwrap().f1, 0.0);
    }

    #[test]
    fn permutation_keeps_f1() {
        let a = mock_embed("上为枝叶中为树干下为树根", 16, 5).unwrap();
        let order: Vec<usize> = (0..a.len()).rev().collect();
        let p = a.permuted(&order);
        let s = bert_score(&p, &a).unwrap();
        assert!((s.f1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn f1_zero_when_precision_recall_nonpositive() {
        let s = SimilarityScore::from_precision_recall(-0.2, 0.1);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn concat_definition() {
        assert_eq!(concat_texts("x", "y"), "x\ny");
        assert_ne!(concat_texts("x", "y"), concat_texts("y", "x"));
        assert_eq!(text_key(&concat_texts("水流", "河")), text_key("水流\n河"));
    }

    fn brute_recall(cand: &TokenEmbeddingSeq, reference: &TokenEmbeddingSeq) -> f64 {
        let m = cosine_matrix(cand, reference).unwrap();
        (0..m.cols)
            .map(|j| (0..m.rows).map(|i| m.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
            .sum::<f64>()
            / m.cols as f64
    }

    proptest! {
        #[test]
        fn swap_symmetry_is_exact(a in "[水木日人山川火土]{1,12}", b in "[水木日人口目耳心]{1,12}", seed in 0u64..50) {
            let x = mock_embed(&a, 16, seed).unwrap();
            let y = mock_embed(&b, 16, seed).unwrap();
            let xy = bert_score(&x, &y).unwrap();
            let yx = bert_score(&y, &x).unwrap();
            prop_assert_eq!(xy.precision, yx.recall);
            prop_assert_eq!(xy.recall, yx.precision);
            prop_assert_eq!(xy.f1, yx.f1);
            prop_assert_eq!(xy, SimilarityScore::from_precision_recall(xy.precision, xy.recall));
            // Negative cosines are kept, so precision and recall may differ in
            // sign; the harmonic mean is only bounded when both are non-negative.
            if xy.precision >= 0.0 && xy.recall >= 0.0 {
                prop_assert!(xy.f1 >= 0.0 && xy.f1 <= xy.precision.max(xy.recall) + 1e-15);
            }
        }

        #[test]
        fn recall_matches_brute_force_after_append(a in "[水木日人]{1,8}", b in "[水木日人山]{1,8}", extra in "[川火土口]", seed in 0u64..20) {
            let cand = mock_embed(&a, 16, seed).unwrap();
            let before = mock_embed(&b, 16, seed).unwrap();
            let after = mock_embed(&format!("{b}{extra}"), 16, seed).unwrap();
            prop_assert!((bert_score(&cand, &before).unwrap().recall - brute_recall(&cand, &before)).abs() < 1e-12);
            let r0 = brute_recall(&cand, &before);
            let r1 = bert_score(&cand, &after).unwrap().recall;
            prop_assert!((r1 - brute_recall(&cand, &after)).abs() < 1e-12);
            // The appended token's best match decides the direction.
            let last = after.len() - 1;
            let m = cosine_matrix(&cand, &after).unwrap();
            let new_best = (0..m.rows).map(|i| m.get(i, last)).fold(f64::NEG_INFINITY, f64::max);
            if new_best <= r0 {
                prop_assert!(r1 <= r0 + 1e-12);
            } else {
                prop_assert!(r1 >= r0 - 1e-12);
            }
        }
    }
}
