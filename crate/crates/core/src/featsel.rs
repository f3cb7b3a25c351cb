//! Supervised column selection for a single binary split.
//!
//! Each column gets a between-cluster score: the pairwise squared-difference
//! sum over the whole sample minus the same sum taken within each label class.
//! Scores are sparsified by soft-thresholding and the `d'` columns with the
//! largest weights feed the classifier.

use crate::svm::SampleView;
use crate::{Error, Result};

pub const DEFAULT_SPARSITY: f64 = 0.1;
pub const DEFAULT_DIM_RATIO: f64 = 0.1;

const SEARCH_TOLERANCE: f64 = 1e-8;
const SEARCH_ITERATIONS: usize = 200;

/// Non-negative column weights after soft-thresholding, scaled so `|w|_1 = s`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWeights {
    pub w: Vec<f64>,
    pub s: f64,
    /// Threshold applied to the scores.
    pub delta: f64,
}

impl FeatureWeights {
    pub fn nonzero(&self) -> usize {
        self.w.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Strictly increasing column indices into the original descriptor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSubset {
    columns: Vec<u32>,
}

impl ColumnSubset {
    pub fn new(columns: Vec<u32>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("columns", "subset must not be empty"));
        }
        if columns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("columns", "must be strictly increasing"));
        }
        Ok(ColumnSubset { columns })
    }

    pub fn all(d: usize) -> Self {
        ColumnSubset {
            columns: (0..d as u32).collect(),
        }
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }
}

/// `d' = max(1, round(c d))`, capped at `d`.
pub fn reduced_dim(ratio: f64, d: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid("dim_ratio", format!("{ratio} is outside (0, 1]")));
    }
    Ok(((ratio * d as f64).round() as usize).clamp(1, d))
}

/// Per-column `TSS_j - WCSS_j`, clamped at zero.
///
/// Both sums run over ordered pairs `p != q`; they are evaluated through
/// `sum_{p,q in S} (p_j - q_j)^2 = 2 |S| sum_{p in S} (p_j - mean_j)^2`.
/// The view's column restriction is ignored: every column is scored.
pub fn per_feature_scores(view: &SampleView<'_>, labels: &[u8]) -> Result<Vec<f64>> {
    let (total, within) = pairwise_sums(view, labels)?;
    Ok(total
        .iter()
        .zip(&within)
        .map(|(t, w)| (t - w).max(0.0))
        .collect())
}

/// `(TSS, WCSS)` per column, both in the pairwise form.
pub fn pairwise_sums(view: &SampleView<'_>, labels: &[u8]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = view.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: labels.len(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels", "binary labels must be 0 or 1"));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    if n < 2 || ones == 0 || ones == n {
        return Err(Error::invalid(
            "labels",
            "scores need at least one sample of each class",
        ));
    }
    let d = view.full_dim();
    let counts = [(n - ones) as f64, ones as f64];

    let mut class_sum = vec![[0f64; 2]; d];
    for (i, &l) in labels.iter().enumerate() {
        for (acc, &x) in class_sum.iter_mut().zip(view.full_row(i)) {
            acc[l as usize] += x as f64;
        }
    }
    let class_mean: Vec<[f64; 2]> = class_sum
        .iter()
        .map(|s| [s[0] / counts[0], s[1] / counts[1]])
        .collect();
    let total_mean: Vec<f64> = class_sum.iter().map(|s| (s[0] + s[1]) / n as f64).collect();

    let mut class_ss = vec![[0f64; 2]; d];
    let mut total_ss = vec![0f64; d];
    for (i, &l) in labels.iter().enumerate() {
        let row = view.full_row(i);
        for j in 0..d {
            let x = row[j] as f64;
            let dc = x - class_mean[j][l as usize];
            class_ss[j][l as usize] += dc * dc;
            let dt = x - total_mean[j];
            total_ss[j] += dt * dt;
        }
    }
    let total = total_ss.iter().map(|ss| 2.0 * n as f64 * ss).collect();
    let within = class_ss
        .iter()
        .map(|ss| 2.0 * counts[0] * ss[0] + 2.0 * counts[1] * ss[1])
        .collect();
    Ok((total, within))
}

/// `max(0, a_j - delta)` elementwise.
pub fn soft_threshold(scores: &[f64], delta: f64) -> Vec<f64> {
    scores.iter().map(|&a| (a - delta).max(0.0)).collect()
}

fn l1_over_l2(v: &[f64]) -> f64 {
    let l2 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return 0.0;
    }
    v.iter().sum::<f64>() / l2
}

/// Soft-thresholded weights; see [`solve_weights_with_support`].
pub fn solve_weights(scores: &[f64], s: f64) -> Result<FeatureWeights> {
    solve_weights_with_support(scores, s, 1)
}

/// Finds the threshold `delta` so that the unit-l2 thresholded vector has l1
/// norm `max(1, min(s sqrt(d), K))`, where `K` is that norm at `delta = 0`,
/// then rescales the thresholded vector to `|w|_1 = s`.
///
/// `delta` is kept below the `min_support`-th largest score, so at least that
/// many columns keep a nonzero weight.
pub fn solve_weights_with_support(scores: &[f64], s: f64, min_support: usize) -> Result<FeatureWeights> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid("s", "sparsity budget must be positive"));
    }
    if scores.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(Error::invalid("scores", "must be finite and non-negative"));
    }
    if scores.iter().all(|&a| a == 0.0) {
        return Err(Error::invalid("scores", "all scores are zero"));
    }
    let d = scores.len();
    let max_ratio = l1_over_l2(scores);
    let target = (s * (d as f64).sqrt()).min(max_ratio).max(1.0);

    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let keep = min_support.clamp(1, d);
    let cap = sorted[keep - 1];

    let mut lo = 0.0;
    if max_ratio > target + SEARCH_TOLERANCE && cap > 0.0 {
        let mut hi = cap;
        for _ in 0..SEARCH_ITERATIONS {
            let mid = 0.5 * (lo + hi);
            let r = l1_over_l2(&soft_threshold(scores, mid));
            if r >= target {
                lo = mid;
            } else {
                hi = mid;
            }
            if (r - target).abs() <= SEARCH_TOLERANCE || hi - lo <= f64::EPSILON * cap {
                break;
            }
        }
    }
    let thresholded = soft_threshold(scores, lo);
    let l1: f64 = thresholded.iter().sum();
    let w = thresholded.iter().map(|v| v * s / l1).collect();
    Ok(FeatureWeights { w, s, delta: lo })
}

/// The `d_prime` columns with the largest weight, ties to the lower index, ascending.
pub fn select_columns(weights: &FeatureWeights, d_prime: usize) -> Result<ColumnSubset> {
    let d = weights.w.len();
    if d_prime == 0 || d_prime > d {
        return Err(Error::invalid(
            "d_prime",
            format!("{d_prime} is outside 1..={d}"),
        ));
    }
    let mut order: Vec<u32> = (0..d as u32).collect();
    order.sort_by(|&a, &b| {
        weights.w[b as usize]
            .total_cmp(&weights.w[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(d_prime);
    order.sort_unstable();
    ColumnSubset::new(order)
}

/// Scores, soft-thresholds and selects `d_prime` columns for one binary split.
///
/// `d_prime == d` and degenerate scores (no column separates the labels)
/// short-circuit to the leading columns.
pub fn select_for_labels(
    view: &SampleView<'_>,
    labels: &[u8],
    d_prime: usize,
    s: f64,
) -> Result<ColumnSubset> {
    let d = view.full_dim();
    if d_prime == d {
        return Ok(ColumnSubset::all(d));
    }
    let scores = per_feature_scores(view, labels)?;
    if scores.iter().all(|&a| a == 0.0) {
        return ColumnSubset::new((0..d_prime as u32).collect());
    }
    let weights = solve_weights_with_support(&scores, s, d_prime)?;
    select_columns(&weights, d_prime)
}
