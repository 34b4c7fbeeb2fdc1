//! Recognition-stage numerics: triplet and cross-entropy losses with analytic
//! gradients, the combined stage-one objective, a P-K batch sampler, and the
//! spatial patch merger used as a visual adapter.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MARGIN: f64 = 0.2;
pub const DEFAULT_GAMMA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum RecogError {
    #[error("triplet lists differ in length: {anchors}/{positives}/{negatives}")]
    LengthMismatch {
        anchors: usize,
        positives: usize,
        negatives: usize,
    },
    #[error("feature dimension mismatch at triplet {index}")]
    DimMismatch { index: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("margin must be positive, got {0}")]
    BadMargin(f64),
    #[error("non-finite feature value")]
    NonFinite,
    #[error("gold index {index} out of range for {classes} classes")]
    GoldOutOfRange { index: usize, classes: usize },
    #[error("grid {height}x{width} is not divisible by merge scale {scale}")]
    NotDivisible {
        height: usize,
        width: usize,
        scale: usize,
    },
    #[error("grid shape mismatch: {0}")]
    Shape(String),
    #[error("no radical class has at least {0} samples")]
    NoEligibleClass(usize),
    #[error("batch size {batch_size} cannot hold {min_per_class} samples of a class")]
    BatchTooSmall {
        batch_size: usize,
        min_per_class: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVec(pub Vec<f64>);

impl FeatureVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletBatch {
    pub anchors: Vec<FeatureVec>,
    pub positives: Vec<FeatureVec>,
    pub negatives: Vec<FeatureVec>,
    pub margin_alpha: f64,
    pub gamma: f64,
}

impl TripletBatch {
    pub fn new(anchors: Vec<FeatureVec>, positives: Vec<FeatureVec>, negatives: Vec<FeatureVec>) -> Self {
        Self {
            anchors,
            positives,
            negatives,
            margin_alpha: DEFAULT_MARGIN,
            gamma: DEFAULT_GAMMA,
        }
    }

    fn check(&self) -> Result<usize, RecogError> {
        let (a, p, n) = (self.anchors.len(), self.positives.len(), self.negatives.len());
        if a != p || a != n {
            return Err(RecogError::LengthMismatch {
                anchors: a,
                positives: p,
                negatives: n,
            });
        }
        if a == 0 {
            return Err(RecogError::EmptyBatch);
        }
        if self.margin_alpha.is_nan() || self.margin_alpha <= 0.0 {
            return Err(RecogError::BadMargin(self.margin_alpha));
        }
        let dim = self.anchors[0].dim();
        for i in 0..a {
            let vs = [&self.anchors[i], &self.positives[i], &self.negatives[i]];
            if vs.iter().any(|v| v.dim() != dim) {
                return Err(RecogError::DimMismatch { index: i });
            }
            if vs.iter().any(|v| v.0.iter().any(|x| !x.is_finite())) {
                return Err(RecogError::NonFinite);
            }
        }
        Ok(dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLoss {
    pub loss: f64,
    pub grad_anchors: Vec<FeatureVec>,
    pub grad_positives: Vec<FeatureVec>,
    pub grad_negatives: Vec<FeatureVec>,
}

fn diff_and_norm(a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
    (d, n)
}

/// Mean hinge over triplets of `max(|a - p| - |a - n| + alpha, 0)` with
/// unsquared Euclidean distances.
///
/// Gradients are zero for inactive triplets and at the hinge kink. A zero
/// distance contributes a zero gradient for its term.
pub fn triplet_loss(batch: &TripletBatch) -> Result<TripletLoss, RecogError> {
    let dim = batch.check()?;
    let n = batch.anchors.len();
    let scale = 1.0 / n as f64;
    let zeros = || vec![FeatureVec(vec![0.0; dim]); n];
    let (mut ga, mut gp, mut gn) = (zeros(), zeros(), zeros());
    let mut total = 0.0;
    for i in 0..n {
        let a = &batch.anchors[i].0;
        let (dpos, npos) = diff_and_norm(a, &batch.positives[i].0);
        let (dneg, nneg) = diff_and_norm(a, &batch.negatives[i].0);
        let hinge = npos - nneg + batch.margin_alpha;
        if hinge <= 0.0 {
            continue;
        }
        total += hinge;
        for k in 0..dim {
            let up = if npos > 0.0 { dpos[k] / npos } else { 0.0 };
            let un = if nneg > 0.0 { dneg[k] / nneg } else { 0.0 };
            ga[i].0[k] = scale * (up - un);
            gp[i].0[k] = -scale * up;
            gn[i].0[k] = scale * un;
        }
    }
    Ok(TripletLoss {
        loss: total * scale,
        grad_anchors: ga,
        grad_positives: gp,
        grad_negatives: gn,
    })
}

/// `gamma * triplet + ce`.
pub fn combined_stage1_loss(triplet: f64, ce: f64, gamma: f64) -> f64 {
    gamma * triplet + ce
}

/// `-log softmax(logits)[gold]` and its gradient `softmax - onehot(gold)`.
pub fn cross_entropy(logits: &[f64], gold: usize) -> Result<(f64, Vec<f64>), RecogError> {
    if gold >= logits.len() {
        return Err(RecogError::GoldOutOfRange {
            index: gold,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(RecogError::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[gold] - max);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    grad[gold] -= 1.0;
    Ok((loss, grad))
}

/// How negatives are chosen when forming triplets from a labelled batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    #[default]
    Uniform,
    HardestInBatch,
}

/// Form one `(anchor, positive, negative)` index triplet per sample that has
/// both a same-class and a different-class partner in the batch.
///
/// Positives are drawn uniformly. Negatives are drawn uniformly or, with
/// [`NegativePolicy::HardestInBatch`], as the nearest different-class sample.
pub fn mine_triplets(
    features: &[FeatureVec],
    labels: &[&str],
    policy: NegativePolicy,
    seed: u64,
) -> Vec<(usize, usize, usize)> {
    assert_eq!(features.len(), labels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for a in 0..labels.len() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != a && labels[j] == labels[a]).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != labels[a]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let p = pos[rng.random_range(0..pos.len())];
        let n = match policy {
            NegativePolicy::Uniform => neg[rng.random_range(0..neg.len())],
            NegativePolicy::HardestInBatch => *neg
                .iter()
                .min_by(|&&x, &&y| {
                    let dx = diff_and_norm(&features[a].0, &features[x].0).1;
                    let dy = diff_and_norm(&features[a].0, &features[y].0).1;
                    dx.total_cmp(&dy).then(x.cmp(&y))
                })
                .expect("non-empty"),
        };
        out.push((a, p, n));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExcludedClass {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SamplerOutput {
    pub batches: Vec<Vec<usize>>,
    /// Classes dropped for having fewer than `min_per_class` samples.
    pub excluded: Vec<ExcludedClass>,
    /// Samples left over after chunking each class into groups of
    /// `min_per_class`; they are not emitted this epoch.
    pub leftover: usize,
}

/// One epoch of P-K batches: each batch takes `min_per_class` samples from
/// each of up to `batch_size / min_per_class` distinct classes.
pub fn pk_batch_sampler(
    labels: &[&str],
    batch_size: usize,
    min_per_class: usize,
    seed: u64,
) -> Result<SamplerOutput, RecogError> {
    let k = min_per_class.max(1);
    let classes_per_batch = batch_size / k;
    if classes_per_batch == 0 {
        return Err(RecogError::BatchTooSmall {
            batch_size,
            min_per_class: k,
        });
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut excluded = Vec::new();
    by_class.retain(|label, idx| {
        if idx.len() < k {
            log::warn!("excluding class {label:?}: {} < {k} samples", idx.len());
            excluded.push(ExcludedClass {
                label: label.to_string(),
                count: idx.len(),
            });
            false
        } else {
            true
        }
    });
    if by_class.is_empty() {
        return Err(RecogError::NoEligibleClass(k));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leftover = 0;
    let mut groups: Vec<Vec<Vec<usize>>> = Vec::with_capacity(by_class.len());
    for idx in by_class.values_mut() {
        idx.shuffle(&mut rng);
        leftover += idx.len() % k;
        let mut g: Vec<Vec<usize>> = idx.chunks_exact(k).map(<[usize]>::to_vec).collect();
        g.reverse();
        groups.push(g);
    }

    let mut batches = Vec::new();
    loop {
        let mut order: Vec<usize> = (0..groups.len()).filter(|&c| !groups[c].is_empty()).collect();
        if order.is_empty() {
            break;
        }
        // Classes with the most remaining groups go first so the epoch does
        // not end with a run of single-class batches; ties are shuffled.
        order.shuffle(&mut rng);
        order.sort_by_key(|&c| std::cmp::Reverse(groups[c].len()));
        let mut batch = Vec::with_capacity(classes_per_batch * k);
        for &c in order.iter().take(classes_per_batch) {
            batch.extend(groups[c].pop().expect("non-empty"));
        }
        batches.push(batch);
    }
    Ok(SamplerOutput {
        batches,
        excluded,
        leftover,
    })
}

/// An `height × width × channels` feature map plus the merger's projection.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `[h][w][c]`.
    pub values: Vec<f64>,
    pub merge_scale: usize,
    /// Row-major `(s·s·C) × out_dim`; patch features are flattened `[dy][dx][c]`.
    pub projection: Vec<f64>,
    pub out_dim: usize,
}

impl FeatureGrid {
    fn check(&self) -> Result<(), RecogError> {
        let s = self.merge_scale;
        if s == 0 || !self.height.is_multiple_of(s) || !self.width.is_multiple_of(s) || self.height == 0 || self.width == 0 {
            return Err(RecogError::NotDivisible {
                height: self.height,
                width: self.width,
                scale: s,
            });
        }
        if self.values.len() != self.height * self.width * self.channels {
            return Err(RecogError::Shape(format!(
                "{} values for {}x{}x{}",
                self.values.len(),
                self.height,
                self.width,
                self.channels
            )));
        }
        if self.projection.len() != s * s * self.channels * self.out_dim {
            return Err(RecogError::Shape(format!(
                "projection has {} weights, expected {}",
                self.projection.len(),
                s * s * self.channels * self.out_dim
            )));
        }
        Ok(())
    }
}

/// Merge `s × s` patches into one `out_dim` vector: flatten each patch,
/// project it, and mean-pool the projections.
///
/// The projection is linear, so this averages the flattened patches first
/// and projects once.
pub fn spatial_patch_merge(grid: &FeatureGrid) -> Result<FeatureVec, RecogError> {
    grid.check()?;
    let (s, c) = (grid.merge_scale, grid.channels);
    let patch_len = s * s * c;
    let n_patches = (grid.height / s) * (grid.width / s);
    let mut mean_patch = vec![0.0; patch_len];
    for h in 0..grid.height {
        for w in 0..grid.width {
            let base = ((h % s) * s + (w % s)) * c;
            let src = (h * grid.width + w) * c;
            for ch in 0..c {
                mean_patch[base + ch] += grid.values[src + ch];
            }
        }
    }
    let inv = 1.0 / n_patches as f64;
    let mut out = vec![0.0; grid.out_dim];
    for (row, &x) in mean_patch.iter().enumerate() {
        let x = x * inv;
        let weights = &grid.projection[row * grid.out_dim..(row + 1) * grid.out_dim];
        for (o, w) in out.iter_mut().zip(weights) {
            *o += x * w;
        }
    }
    Ok(FeatureVec(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn fv(v: &[f64]) -> FeatureVec {
        FeatureVec(v.to_vec())
    }

    #[test]
    fn inactive_hinge_gives_zero() {
        let mut b = TripletBatch::new(vec![fv(&[0.0, 0.0])], vec![fv(&[0.0, 0.0])], vec![fv(&[3.0, 4.0])]);
        b.margin_alpha = 1.0;
        let out = triplet_loss(&b).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_anchors[0].0.iter().all(|&g| g == 0.0));
        assert!(out.grad_negatives[0].0.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn half_margin_case() {
        let mut b = TripletBatch::new(vec![fv(&[0.0, 0.0])], vec![fv(&[1.0, 0.0])], vec![fv(&[0.0, 1.0])]);
        b.margin_alpha = 0.5;
        assert!((triplet_loss(&b).unwrap().loss - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_distance_term_has_zero_gradient() {
        let mut b = TripletBatch::new(vec![fv(&[1.0, 1.0])], vec![fv(&[1.0, 1.0])], vec![fv(&[1.0, 1.1])]);
        b.margin_alpha = 0.5;
        let out = triplet_loss(&b).unwrap();
        assert!((out.loss - 0.4).abs() < 1e-12);
        assert_eq!(out.grad_positives[0].0, vec![0.0, 0.0]);
        assert!(out.grad_negatives[0].0[1] != 0.0);
    }

    #[test]
    fn triplet_errors() {
        let b = TripletBatch::new(vec![fv(&[0.0])], vec![], vec![]);
        assert!(matches!(triplet_loss(&b), Err(RecogError::LengthMismatch { .. })));
        let mut b = TripletBatch::new(vec![fv(&[0.0])], vec![fv(&[1.0])], vec![fv(&[2.0])]);
        b.margin_alpha = 0.0;
        assert!(matches!(triplet_loss(&b), Err(RecogError::BadMargin(_))));
        let b = TripletBatch::new(vec![fv(&[0.0])], vec![fv(&[1.0, 0.0])], vec![fv(&[2.0])]);
        assert!(matches!(triplet_loss(&b), Err(RecogError::DimMismatch { index: 0 })));
    }

    #[test]
    fn combined_loss_cases() {
        assert_eq!(combined_stage1_loss(0.0, 1.0, 0.5), 1.0);
        assert_eq!(combined_stage1_loss(2.0, 0.0, 0.5), 1.0);
        assert!((combined_stage1_loss(0.5, 0.7, 2.0) - 1.7).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_cases() {
        let (l, g) = cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.iter().sum::<f64>()).abs() < 1e-12);
        let (l, _) = cross_entropy(&[0.0, 50.0, 0.0], 1).unwrap();
        assert!(l < 1e-6);
        assert!(matches!(
            cross_entropy(&[0.0, 1.0], 2),
            Err(RecogError::GoldOutOfRange { index: 2, classes: 2 })
        ));
    }

    #[test]
    fn sampler_two_by_four() {
        let labels = ["a", "a", "a", "a", "b", "b", "b", "b"];
        let out = pk_batch_sampler(&labels, 4, 2, 9).unwrap();
        assert_eq!(out.batches.len(), 2);
        for batch in &out.batches {
            let a = batch.iter().filter(|&&i| labels[i] == "a").count();
            let b = batch.iter().filter(|&&i| labels[i] == "b").count();
            assert_eq!((a, b), (2, 2));
        }
        let mut all: Vec<usize> = out.batches.concat();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_excludes_singletons_and_is_deterministic() {
        let labels = ["a", "a", "b", "c", "c", "c"];
        let out = pk_batch_sampler(&labels, 4, 2, 1).unwrap();
        assert_eq!(
            out.excluded,
            vec![ExcludedClass {
                label: "b".into(),
                count: 1
            }]
        );
        assert_eq!(out.leftover, 1);
        assert_eq!(out, pk_batch_sampler(&labels, 4, 2, 1).unwrap());
        assert!(matches!(
            pk_batch_sampler(&["a", "b"], 4, 2, 0),
            Err(RecogError::NoEligibleClass(2))
        ));
        assert!(matches!(
            pk_batch_sampler(&["a", "a"], 1, 2, 0),
            Err(RecogError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn mining_policies() {
        let feats = vec![fv(&[0.0]), fv(&[0.1]), fv(&[5.0]), fv(&[0.5])];
        let labels = ["a", "a", "b", "b"];
        let hard = mine_triplets(&feats, &labels, NegativePolicy::HardestInBatch, 0);
        assert_eq!(hard[0], (0, 1, 3));
        let uni = mine_triplets(&feats, &labels, NegativePolicy::Uniform, 0);
        assert_eq!(uni.len(), 4);
        for (a, p, n) in uni {
            assert_eq!(labels[a], labels[p]);
            assert_ne!(labels[a], labels[n]);
            assert_ne!(a, p);
        }
    }

    fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, s: usize, m: usize) -> FeatureGrid {
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
        FeatureGrid {
            height: h,
            width: w,
            channels: c,
            values: draw(h * w * c),
            merge_scale: s,
            projection: draw(s * s * c * m),
            out_dim: m,
        }
    }

    #[test]
    fn single_patch_is_projection_of_flattened_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(&mut rng, 2, 2, 3, 2, 5);
        let out = spatial_patch_merge(&g).unwrap();
        for o in 0..5 {
            let expect: f64 = (0..12).map(|r| g.values[r] * g.projection[r * 5 + o]).sum();
            assert!((out.0[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grid_and_divisibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = random_grid(&mut rng, 4, 4, 2, 2, 3);
        g.values.iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(spatial_patch_merge(&g).unwrap().0, vec![0.0; 3]);
        let bad = random_grid(&mut rng, 4, 6, 2, 4, 3);
        assert!(matches!(spatial_patch_merge(&bad), Err(RecogError::NotDivisible { .. })));
    }

    #[test]
    fn patch_merge_is_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(&mut rng, 6, 4, 3, 2, 4);
        let base = spatial_patch_merge(&g).unwrap();
        let mut scaled = g.clone();
        scaled.values.iter_mut().for_each(|v| *v *= -2.5);
        let out = spatial_patch_merge(&scaled).unwrap();
        for (a, b) in out.0.iter().zip(&base.0) {
            assert!((a + 2.5 * b).abs() < 1e-10);
        }
    }
}
