//! Linear max-margin classifiers trained by stochastic subgradient descent.
//!
//! The solver is Pegasos on the L2-regularized hinge loss, with the bias folded
//! in as a constant input feature. Step size is `1/(lambda t)`, samples are
//! visited in a seeded shuffle each epoch, and the returned model is the
//! average of the iterates over the second half of training.
//!
//! With step `1/(lambda t)` the iterate is always `w_t = A_t / (lambda (t-1))`
//! where `A_t` is the running sum of the violating `y x` terms, so the solver
//! keeps `A` unscaled and folds each update straight into the average with a
//! precomputed harmonic weight. Memory is `O(d')` regardless of `N`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DescriptorSet;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            lambda: 1e-4,
            epochs: 20,
            seed: 0,
        }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda", "must be positive and finite"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        SvmConfig { seed, ..self }
    }
}

/// Weight vector over a column subset of the original descriptor, plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperplane {
    weights: Vec<f32>,
    bias: f32,
    columns: Vec<u32>,
}

impl Hyperplane {
    pub fn new(weights: Vec<f32>, bias: f32, columns: Vec<u32>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("weights", "hyperplane needs at least one weight"));
        }
        if weights.len() != columns.len() {
            return Err(Error::DimensionMismatch {
                expected: columns.len(),
                found: weights.len(),
            });
        }
        if columns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("columns", "must be strictly increasing"));
        }
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::invalid("weights", "must be finite"));
        }
        Ok(Hyperplane {
            weights,
            bias,
            columns,
        })
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> f32 {
        self.bias
    }

    pub fn columns(&self) -> &[u32] {
        &self.columns
    }

    pub fn reduced_dim(&self) -> usize {
        self.weights.len()
    }

    /// Smallest descriptor width this hyperplane can be applied to.
    pub fn min_input_dim(&self) -> usize {
        self.columns.last().map_or(0, |&c| c as usize + 1)
    }

    /// `weights . x[columns] + bias`, where `x` is a full-width descriptor.
    pub fn decision_value(&self, x: &[f32], expected_dim: usize) -> Result<f64> {
        if x.len() != expected_dim || self.min_input_dim() > x.len() {
            return Err(Error::DimensionMismatch {
                expected: expected_dim.max(self.min_input_dim()),
                found: x.len(),
            });
        }
        Ok(self.decision_value_unchecked(x))
    }

    #[inline]
    pub(crate) fn decision_value_unchecked(&self, x: &[f32]) -> f64 {
        let dot: f64 = self
            .columns
            .iter()
            .zip(&self.weights)
            .map(|(&c, &w)| w as f64 * x[c as usize] as f64)
            .sum();
        dot + self.bias as f64
    }
}

/// Result of binary training: a hyperplane, or a constant when labels were uniform.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Constant(u8),
    Linear(Hyperplane),
}

impl Classifier {
    /// Predicted bit; a decision value of exactly 0 maps to 1.
    pub fn predict_bit(&self, x: &[f32], expected_dim: usize) -> Result<u8> {
        match self {
            Classifier::Constant(bit) => {
                if x.len() != expected_dim {
                    return Err(Error::DimensionMismatch {
                        expected: expected_dim,
                        found: x.len(),
                    });
                }
                Ok(*bit)
            }
            Classifier::Linear(h) => Ok((h.decision_value(x, expected_dim)? >= 0.0) as u8),
        }
    }

    #[inline]
    pub(crate) fn predict_bit_unchecked(&self, x: &[f32]) -> u8 {
        match self {
            Classifier::Constant(bit) => *bit,
            Classifier::Linear(h) => (h.decision_value_unchecked(x) >= 0.0) as u8,
        }
    }

    pub fn as_linear(&self) -> Option<&Hyperplane> {
        match self {
            Classifier::Linear(h) => Some(h),
            Classifier::Constant(_) => None,
        }
    }
}

/// Rows of a row-major matrix restricted to a row range and an optional column subset.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    data: &'a [f32],
    stride: usize,
    first_row: usize,
    rows: usize,
    columns: Option<&'a [u32]>,
}

impl<'a> SampleView<'a> {
    pub fn new(
        data: &'a [f32],
        stride: usize,
        rows: std::ops::Range<usize>,
        columns: Option<&'a [u32]>,
    ) -> Result<Self> {
        if stride == 0 || !data.len().is_multiple_of(stride) {
            return Err(Error::invalid("data", "length is not a multiple of the row width"));
        }
        if rows.end > data.len() / stride || rows.start > rows.end {
            return Err(Error::invalid("rows", "range exceeds the matrix"));
        }
        if let Some(cols) = columns {
            if cols.is_empty() || cols.iter().any(|&c| c as usize >= stride) {
                return Err(Error::invalid("columns", "empty or out of range"));
            }
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid("columns", "must be strictly increasing"));
            }
        }
        Ok(SampleView {
            data,
            stride,
            first_row: rows.start,
            rows: rows.end - rows.start,
            columns,
        })
    }

    pub fn of_set(ds: &'a DescriptorSet, rows: std::ops::Range<usize>, columns: Option<&'a [u32]>) -> Result<Self> {
        Self::new(ds.as_slice(), ds.dim(), rows, columns)
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn reduced_dim(&self) -> usize {
        self.columns.map_or(self.stride, <[u32]>::len)
    }

    /// Width of the underlying rows, ignoring the column restriction.
    pub fn full_dim(&self) -> usize {
        self.stride
    }

    /// Sample `i` at full width.
    #[inline]
    pub fn full_row(&self, i: usize) -> &'a [f32] {
        self.row(i)
    }

    /// The same rows restricted to `columns`.
    pub fn with_columns(&self, columns: &'a [u32]) -> Result<SampleView<'a>> {
        SampleView::new(
            self.data,
            self.stride,
            self.first_row..self.first_row + self.rows,
            Some(columns),
        )
    }

    #[inline]
    fn row(&self, i: usize) -> &'a [f32] {
        let start = (self.first_row + i) * self.stride;
        &self.data[start..start + self.stride]
    }

    #[inline]
    fn dot(&self, i: usize, w: &[f64]) -> f64 {
        let row = self.row(i);
        match self.columns {
            None => row.iter().zip(w).map(|(&x, &w)| x as f64 * w).sum(),
            Some(cols) => cols.iter().zip(w).map(|(&c, &w)| row[c as usize] as f64 * w).sum(),
        }
    }

    #[inline]
    fn axpy(&self, i: usize, alpha: f64, acc: &mut [f64]) {
        let row = self.row(i);
        match self.columns {
            None => acc.iter_mut().zip(row).for_each(|(a, &x)| *a += alpha * x as f64),
            Some(cols) => acc
                .iter_mut()
                .zip(cols)
                .for_each(|(a, &c)| *a += alpha * row[c as usize] as f64),
        }
    }

    fn column_ids(&self) -> Vec<u32> {
        match self.columns {
            Some(c) => c.to_vec(),
            None => (0..self.stride as u32).collect(),
        }
    }
}

/// Trains on a dense `N x d'` matrix; the hyperplane's columns are `0..d'`.
pub fn train_binary(data: &Array2<f32>, labels: &[u8], config: &SvmConfig) -> Result<Classifier> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: pos / data.ncols().max(1),
            column: pos % data.ncols().max(1),
        });
    }
    let data = data.as_standard_layout();
    let view = SampleView::new(
        data.as_slice().expect("standard layout"),
        data.ncols(),
        0..data.nrows(),
        None,
    )?;
    train_binary_view(&view, labels, config)
}

/// Trains on a view; labels are 0/1, mapped to -1/+1 internally.
pub fn train_binary_view(view: &SampleView<'_>, labels: &[u8], config: &SvmConfig) -> Result<Classifier> {
    config.validate()?;
    if view.is_empty() {
        return Err(Error::invalid("data", "at least one sample is required"));
    }
    if labels.len() != view.len() {
        return Err(Error::DimensionMismatch {
            expected: view.len(),
            found: labels.len(),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels", "binary labels must be 0 or 1"));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Ok(Classifier::Constant(first));
    }

    let signs: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
    let (mut weights, mut bias) = pegasos(view, &signs, config);
    let scale = best_scale(view, &signs, &weights, bias, config.lambda);
    weights.iter_mut().for_each(|w| *w *= scale);
    bias *= scale;
    let weights: Vec<f32> = weights.iter().map(|&w| w as f32).collect();
    Ok(Classifier::Linear(Hyperplane::new(
        weights,
        bias as f32,
        view.column_ids(),
    )?))
}

/// Returns averaged `(weights, bias)` in f64.
fn pegasos(view: &SampleView<'_>, signs: &[f64], config: &SvmConfig) -> (Vec<f64>, f64) {
    let n = view.len();
    let dim = view.reduced_dim();
    let lambda = config.lambda;
    let total = (config.epochs * n) as u64;
    // iterates w_t exist for t = 2..=total+1; average the last half of them
    let avg_from = (total / 2 + 1).max(2);
    let averaged = (total + 2 - avg_from) as f64;

    // tail[t] = sum_{k=t}^{total} 1/k, so sum_{tau=a}^{total+1} 1/(tau-1) = tail[a-1]
    let mut tail = vec![0f64; total as usize + 2];
    for k in (1..=total as usize).rev() {
        tail[k] = tail[k + 1] + 1.0 / k as f64;
    }
    let update_weight = |step: u64| {
        let a = (step + 1).max(avg_from);
        tail[(a - 1) as usize] / (lambda * averaged)
    };

    let mut acc = vec![0f64; dim];
    let mut acc_bias = 0f64;
    let mut avg = vec![0f64; dim];
    let mut avg_bias = 0f64;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0u64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            step += 1;
            let y = signs[i];
            let margin = if step == 1 {
                0.0
            } else {
                y * (view.dot(i, &acc) + acc_bias) / (lambda * (step - 1) as f64)
            };
            if margin < 1.0 {
                view.axpy(i, y, &mut acc);
                acc_bias += y;
                let weight = update_weight(step);
                view.axpy(i, y * weight, &mut avg);
                avg_bias += y * weight;
            }
        }
    }
    (avg, avg_bias)
}

/// Exact minimizer over `alpha > 0` of the objective at `alpha (w, b)`.
///
/// Scaling leaves every prediction unchanged. Returns 1 when the minimizer is
/// at `alpha = 0`, since collapsing to the zero model would change predictions.
fn best_scale(view: &SampleView<'_>, signs: &[f64], w: &[f64], b: f64, lambda: f64) -> f64 {
    let n = view.len() as f64;
    let curvature = lambda * (w.iter().map(|v| v * v).sum::<f64>() + b * b);
    let margins: Vec<f64> = (0..view.len())
        .map(|i| signs[i] * (view.dot(i, w) + b))
        .collect();
    // slope of the hinge part just right of alpha: -(sum of active margins)/n
    let mut active_sum: f64 = margins.iter().sum();
    if curvature == 0.0 || active_sum <= 0.0 {
        return 1.0;
    }
    let mut breaks: Vec<(f64, f64)> = margins
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| (1.0 / m, m))
        .collect();
    breaks.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (at, m) in breaks {
        let root = active_sum / (n * curvature);
        if root <= at {
            return root;
        }
        active_sum -= m;
        if active_sum <= 0.0 {
            return at;
        }
    }
    active_sum / (n * curvature)
}

/// Regularized hinge objective `lambda/2 |w|^2 + mean(max(0, 1 - y f(x)))`,
/// with the bias counted in the regularizer as the solver does.
pub fn objective(h: &Hyperplane, view: &SampleView<'_>, labels: &[u8], lambda: f64) -> f64 {
    let w: Vec<f64> = h.weights.iter().map(|&v| v as f64).collect();
    let b = h.bias as f64;
    let reg = w.iter().map(|v| v * v).sum::<f64>() + b * b;
    let hinge: f64 = (0..view.len())
        .map(|i| {
            let y = if labels[i] == 1 { 1.0 } else { -1.0 };
            (1.0 - y * (view.dot(i, &w) + b)).max(0.0)
        })
        .sum::<f64>()
        / view.len() as f64;
    0.5 * lambda * reg + hinge
}

/// One-vs-rest linear classifiers over full-width descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct MulticlassModel {
    per_class: Vec<Hyperplane>,
    dim: usize,
}

impl MulticlassModel {
    pub fn new(per_class: Vec<Hyperplane>, dim: usize) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::invalid("per_class", "at least one class is required"));
        }
        let full: Vec<u32> = (0..dim as u32).collect();
        if per_class.iter().any(|h| h.columns != full) {
            return Err(Error::invalid("per_class", "router hyperplanes must span every column"));
        }
        Ok(MulticlassModel { per_class, dim })
    }

    pub fn classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hyperplanes(&self) -> &[Hyperplane] {
        &self.per_class
    }

    /// Argmax of decision values; ties go to the lowest class id.
    pub fn predict_class(&self, x: &[f32]) -> Result<usize> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.predict_class_unchecked(x))
    }

    pub(crate) fn predict_class_unchecked(&self, x: &[f32]) -> usize {
        let mut best = 0;
        let mut best_value = f64::NEG_INFINITY;
        for (k, h) in self.per_class.iter().enumerate() {
            let v = h.decision_value_unchecked(x);
            if v > best_value {
                best = k;
                best_value = v;
            }
        }
        best
    }
}

/// Trains `num_classes` one-vs-rest hyperplanes; class `k` uses seed `config.seed + k`.
pub fn train_multiclass(
    ds: &DescriptorSet,
    labels: &[usize],
    num_classes: usize,
    config: &SvmConfig,
) -> Result<MulticlassModel> {
    config.validate()?;
    if num_classes == 0 {
        return Err(Error::invalid("num_classes", "must be at least 1"));
    }
    if labels.len() != ds.len() {
        return Err(Error::DimensionMismatch {
            expected: ds.len(),
            found: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::invalid(
            "labels",
            format!("class id {bad} is not below {num_classes}"),
        ));
    }
    let mut counts = vec![0usize; num_classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass { class });
    }
    let d = ds.dim();
    if num_classes == 1 {
        let always = Hyperplane::new(vec![0.0; d], 1.0, (0..d as u32).collect())?;
        return MulticlassModel::new(vec![always], d);
    }

    let view = SampleView::of_set(ds, 0..ds.len(), None)?;
    let per_class = (0..num_classes)
        .into_par_iter()
        .map(|k| {
            let bits: Vec<u8> = labels.iter().map(|&l| (l == k) as u8).collect();
            let cfg = config.with_seed(config.seed.wrapping_add(k as u64));
            match train_binary_view(&view, &bits, &cfg)? {
                Classifier::Linear(h) => Ok(h),
                Classifier::Constant(_) => unreachable!("every class has samples on both sides"),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    MulticlassModel::new(per_class, d)
}
