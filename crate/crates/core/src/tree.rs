//! Full and compressed training over index bits, inference, and storage sizing.
//!
//! Compressed training fits one classifier per bit level on the whole
//! database, so a model holds `b = ceil(log2 N)` classifiers. Full training
//! fits one classifier per internal node of the index tree on that node's
//! members only, and exists mostly for comparison.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitcodec::{bit_at, bits_required, node_members, TreeAddress};
use crate::dataset::{l2_normalize, DescriptorSet};
use crate::featsel::{self, ColumnSubset};
use crate::model::layout;
use crate::regions::{uniform_boundaries, SegmentationMethod};
use crate::svm::{train_binary_view, Classifier, SampleView, SvmConfig};
use crate::{Error, Result};

/// Largest database accepted by full training.
pub const FULL_TRAINING_MAX_N: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Full,
    #[default]
    Compressed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// `c = d'/d`, ignored when `d_prime` is set.
    pub dim_ratio: f64,
    /// Explicit reduced dimension, e.g. from budget fitting.
    pub d_prime: Option<usize>,
    /// Soft-thresholding l1 budget `s`.
    pub sparsity: f64,
    pub svm: SvmConfig,
    /// One column subset for every level, chosen from level-1 labels.
    pub shared_subset: bool,
    /// Unit-normalize rows before training.
    pub normalize: bool,
    pub segmentation: SegmentationMethod,
    /// Hard cap on the serialized size; overrides `dim_ratio` and `d_prime`.
    pub budget_bytes: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::Compressed,
            dim_ratio: featsel::DEFAULT_DIM_RATIO,
            d_prime: None,
            sparsity: featsel::DEFAULT_SPARSITY,
            svm: SvmConfig::default(),
            shared_subset: false,
            normalize: false,
            segmentation: SegmentationMethod::Changepoint,
            budget_bytes: None,
        }
    }
}

impl TrainConfig {
    pub fn reduced_dim(&self, d: usize) -> Result<usize> {
        match self.d_prime {
            Some(dp) if dp >= 1 && dp <= d => Ok(dp),
            Some(dp) => Err(Error::invalid("d_prime", format!("{dp} is outside 1..={d}"))),
            None => featsel::reduced_dim(self.dim_ratio, d),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.svm.validate()?;
        self.reduced_dim(d)?;
        if !(self.sparsity > 0.0 && self.sparsity.is_finite()) {
            return Err(Error::invalid("sparsity", "must be positive"));
        }
        Ok(())
    }
}

/// Mixes a base seed with tree and node coordinates.
pub(crate) fn derive_seed(base: u64, tree: u64, node: u64) -> u64 {
    let mut z = base
        ^ tree.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ node.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training labels of level `level` (1-based): bit `level` of every index.
pub fn level_labels(n: usize, width: u32, level: u32) -> Vec<u8> {
    (0..n as u64).map(|i| bit_at(i, level, width)).collect()
}

/// One classifier per bit level.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTreeModel {
    n: u64,
    width: u32,
    dim: usize,
    levels: Vec<Classifier>,
}

impl CompressedTreeModel {
    pub fn new(n: u64, dim: usize, levels: Vec<Classifier>) -> Result<Self> {
        let width = bits_required(n)?;
        if levels.len() != width as usize {
            return Err(Error::invalid(
                "levels",
                format!("{} classifiers for a {width}-bit tree", levels.len()),
            ));
        }
        check_classifiers(levels.iter(), dim)?;
        Ok(CompressedTreeModel {
            n,
            width,
            dim,
            levels,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> &[Classifier] {
        &self.levels
    }

    pub fn predict_bits(&self, q: &[f32]) -> Result<Vec<u8>> {
        self.check_dim(q)?;
        Ok(self.levels.iter().map(|c| c.predict_bit_unchecked(q)).collect())
    }

    fn check_dim(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: q.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn infer_unchecked(&self, q: &[f32]) -> u64 {
        let raw = self
            .levels
            .iter()
            .fold(0u64, |acc, c| (acc << 1) | c.predict_bit_unchecked(q) as u64);
        raw.min(self.n - 1)
    }
}

fn check_classifiers<'a>(classifiers: impl Iterator<Item = &'a Classifier>, dim: usize) -> Result<()> {
    for c in classifiers {
        match c {
            Classifier::Constant(bit) if *bit > 1 => {
                return Err(Error::invalid("classifier", "constant bit must be 0 or 1"))
            }
            Classifier::Linear(h) if h.min_input_dim() > dim => {
                return Err(Error::invalid(
                    "classifier",
                    format!("column {} is outside dimension {dim}", h.min_input_dim() - 1),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// One classifier per internal node that has members on both sides.
#[derive(Debug, Clone, PartialEq)]
pub struct FullTreeModel {
    n: u64,
    width: u32,
    dim: usize,
    nodes: BTreeMap<u64, Classifier>,
}

impl FullTreeModel {
    pub fn new(n: u64, dim: usize, nodes: BTreeMap<u64, Classifier>) -> Result<Self> {
        let width = bits_required(n)?;
        for &j in nodes.keys() {
            let node = TreeAddress::new(j);
            if node.level() >= width {
                return Err(Error::invalid("nodes", format!("node {j} is not internal")));
            }
            if !spans_both_children(node, n, width) {
                return Err(Error::invalid(
                    "nodes",
                    format!("node {j} does not have members on both sides"),
                ));
            }
        }
        check_classifiers(nodes.values(), dim)?;
        Ok(FullTreeModel {
            n,
            width,
            dim,
            nodes,
        })
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes(&self) -> &BTreeMap<u64, Classifier> {
        &self.nodes
    }
}

fn spans_both_children(node: TreeAddress, n: u64, width: u32) -> bool {
    let left = node_members(node.zero_child(), n, width).expect("internal node");
    let right = node_members(node.one_child(), n, width).expect("internal node");
    !left.is_empty() && !right.is_empty()
}

fn prepare(ds: &DescriptorSet, config: &TrainConfig) -> Result<Option<DescriptorSet>> {
    config.validate(ds.dim())?;
    if config.normalize {
        Ok(Some(l2_normalize(ds)?))
    } else {
        Ok(None)
    }
}

/// Fits the `b` level classifiers of a compressed tree.
pub fn train_compressed(ds: &DescriptorSet, config: &TrainConfig) -> Result<CompressedTreeModel> {
    let normalized = prepare(ds, config)?;
    let ds = normalized.as_ref().unwrap_or(ds);
    let d_prime = match config.budget_bytes {
        Some(budget) => fit_budget_for_sizes(&[ds.len()], ds.dim(), budget)?.chosen_d_prime,
        None => config.reduced_dim(ds.dim())?,
    };
    train_compressed_rows(ds, 0..ds.len(), d_prime, config, 0)
}

/// Compressed tree over rows `[rows)`, indices re-based to zero.
pub(crate) fn train_compressed_rows(
    ds: &DescriptorSet,
    rows: std::ops::Range<usize>,
    d_prime: usize,
    config: &TrainConfig,
    tree_id: u64,
) -> Result<CompressedTreeModel> {
    let n = rows.len();
    let width = bits_required(n as u64)?;
    let view = SampleView::of_set(ds, rows, None)?;

    let shared = if config.shared_subset && n >= 2 {
        let labels = level_labels(n, width, 1);
        Some(featsel::select_for_labels(&view, &labels, d_prime, config.sparsity)?)
    } else {
        None
    };

    let levels = (1..=width)
        .into_par_iter()
        .map(|level| {
            let labels = level_labels(n, width, level);
            let seed = derive_seed(config.svm.seed, tree_id, level as u64);
            train_split(&view, &labels, d_prime, shared.as_ref(), config, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    CompressedTreeModel::new(n as u64, ds.dim(), levels)
}

fn train_split(
    view: &SampleView<'_>,
    labels: &[u8],
    d_prime: usize,
    shared: Option<&ColumnSubset>,
    config: &TrainConfig,
    seed: u64,
) -> Result<Classifier> {
    if let Some(&first) = labels.first() {
        if labels.iter().all(|&l| l == first) {
            return Ok(Classifier::Constant(first));
        }
    }
    let selected;
    let columns = match shared {
        Some(c) => c,
        None => {
            selected = featsel::select_for_labels(view, labels, d_prime, config.sparsity)?;
            &selected
        }
    };
    let restricted = view.with_columns(columns.as_slice())?;
    train_binary_view(&restricted, labels, &config.svm.with_seed(seed))
}

/// Fits a classifier at every internal node with members on both sides.
pub fn train_full(ds: &DescriptorSet, config: &TrainConfig) -> Result<FullTreeModel> {
    if ds.len() > FULL_TRAINING_MAX_N {
        return Err(Error::invalid(
            "n",
            format!("full training is limited to {FULL_TRAINING_MAX_N} places, got {}", ds.len()),
        ));
    }
    if config.budget_bytes.is_some() {
        return Err(Error::invalid("budget_bytes", "byte budgets apply to the compressed scheme only"));
    }
    let normalized = prepare(ds, config)?;
    let ds = normalized.as_ref().unwrap_or(ds);
    let d_prime = config.reduced_dim(ds.dim())?;
    let n = ds.len() as u64;
    let width = bits_required(n)?;

    let mut trainable = Vec::new();
    let mut stack = vec![TreeAddress::ROOT];
    while let Some(node) = stack.pop() {
        if node.level() >= width || node_members(node, n, width)?.is_empty() {
            continue;
        }
        if spans_both_children(node, n, width) {
            trainable.push(node);
        }
        stack.push(node.zero_child());
        stack.push(node.one_child());
    }
    trainable.sort();

    let shared = if config.shared_subset && n >= 2 {
        let view = SampleView::of_set(ds, 0..ds.len(), None)?;
        let labels = level_labels(n as usize, width, 1);
        Some(featsel::select_for_labels(&view, &labels, d_prime, config.sparsity)?)
    } else {
        None
    };
    let trained = trainable
        .par_iter()
        .map(|&node| {
            let members = node_members(node, n, width)?;
            let level = node.level() + 1;
            let labels: Vec<u8> = members.clone().map(|i| bit_at(i, level, width)).collect();
            let node_view = SampleView::of_set(ds, members.start as usize..members.end as usize, None)?;
            let seed = derive_seed(config.svm.seed, 0, node.node_index);
            let c = train_split(&node_view, &labels, d_prime, shared.as_ref(), config, seed)?;
            Ok((node.node_index, c))
        })
        .collect::<Result<Vec<_>>>()?;
    FullTreeModel::new(n, ds.dim(), trained.into_iter().collect())
}

/// Reads the level predictions as an index, clamped to `[0, n)`.
pub fn infer_compressed(model: &CompressedTreeModel, q: &[f32]) -> Result<u64> {
    model.check_dim(q)?;
    Ok(model.infer_unchecked(q))
}

/// Root-to-leaf descent of a full tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Descent {
    pub index: u64,
    pub path: Vec<u64>,
    pub evaluations: usize,
}

pub fn infer_full(model: &FullTreeModel, q: &[f32]) -> Result<u64> {
    Ok(infer_full_traced(model, q)?.index)
}

/// Descends from the root; nodes without a classifier force the only non-empty branch.
pub fn infer_full_traced(model: &FullTreeModel, q: &[f32]) -> Result<Descent> {
    if q.len() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            found: q.len(),
        });
    }
    let mut node = TreeAddress::ROOT;
    let mut path = vec![node.node_index];
    let mut evaluations = 0;
    for _ in 0..model.width {
        let bit = match model.nodes.get(&node.node_index) {
            Some(c) => {
                evaluations += 1;
                c.predict_bit_unchecked(q)
            }
            None => {
                let left = node_members(node.zero_child(), model.n, model.width)?;
                if left.is_empty() {
                    1
                } else {
                    0
                }
            }
        };
        node = node.child(bit);
        path.push(node.node_index);
    }
    Ok(Descent {
        index: node.prefix(),
        path,
        evaluations,
    })
}

/// Outcome of fitting `d'` to a byte budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub budget_bytes: u64,
    pub chosen_d_prime: usize,
    pub predicted_bytes: u64,
}

/// Largest `d'` whose compressed, regionized model fits the budget, assuming
/// the near-equal split of `n` places into `r` regions.
pub fn fit_budget(n: usize, d: usize, r: usize, budget_bytes: u64) -> Result<BudgetPlan> {
    if r == 0 || r > n {
        return Err(Error::invalid("r", format!("{r} regions for {n} places")));
    }
    let boundaries = uniform_boundaries(n, r);
    let sizes: Vec<usize> = boundaries.windows(2).map(|w| w[1] - w[0]).collect();
    fit_budget_for_sizes(&sizes, d, budget_bytes)
}

/// As [`fit_budget`], for known region sizes.
pub fn fit_budget_for_sizes(region_sizes: &[usize], d: usize, budget_bytes: u64) -> Result<BudgetPlan> {
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    if region_sizes.is_empty() || region_sizes.contains(&0) {
        return Err(Error::invalid("region_sizes", "regions must be non-empty"));
    }
    let predicted = |d_prime: usize| layout::regionized_bytes(region_sizes, d, d_prime);
    let minimum = predicted(1)?;
    if minimum > budget_bytes {
        return Err(Error::InfeasibleBudget {
            budget: budget_bytes,
            minimum,
        });
    }
    // size is affine in d' with slope 8 * (number of hyperplane levels)
    let slope = predicted(2)? - minimum;
    let chosen = match (budget_bytes - minimum).checked_div(slope) {
        Some(extra) => (1 + extra as usize).min(d),
        None => d,
    };
    Ok(BudgetPlan {
        budget_bytes,
        chosen_d_prime: chosen,
        predicted_bytes: predicted(chosen)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthParams};
    use ndarray::Array2;

    fn separable(n: usize, d: usize, seed: u64) -> DescriptorSet {
        let (db, _) = generate_synthetic(&SynthParams {
            n,
            d,
            walk_sigma: 1.0,
            query_sigma: 0.0,
            seed,
        })
        .unwrap();
        db
    }

    fn full_cfg(scheme: Scheme) -> TrainConfig {
        TrainConfig {
            scheme,
            dim_ratio: 1.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn level_labels_follow_codes() {
        assert_eq!(level_labels(8, 3, 2), vec![0, 0, 1, 1, 0, 0, 1, 1]);
        assert_eq!(level_labels(8, 3, 1), vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(level_labels(5, 3, 3), vec![0, 1, 0, 1, 0]);
        let node2 = node_members(TreeAddress::new(2), 8, 3).unwrap();
        let labels: Vec<u8> = node2.map(|i| bit_at(i, 2, 3)).collect();
        assert_eq!(labels, vec![0, 0, 1, 1]);
    }

    #[test]
    fn single_place_is_constant_zero() {
        let ds = DescriptorSet::new(Array2::from_elem((1, 3), 0.5)).unwrap();
        let m = train_compressed(&ds, &TrainConfig::default()).unwrap();
        assert_eq!(m.width(), 1);
        assert_eq!(m.levels(), &[Classifier::Constant(0)]);
        assert_eq!(infer_compressed(&m, &[9.0, 9.0, 9.0]).unwrap(), 0);

        let f = train_full(&ds, &TrainConfig::default()).unwrap();
        assert!(f.nodes().is_empty());
        assert_eq!(infer_full(&f, &[1.0, 2.0, 3.0]).unwrap(), 0);
    }

    #[test]
    fn compressed_self_query_recovers_every_row() {
        let ds = separable(64, 128, 5);
        let m = train_compressed(&ds, &full_cfg(Scheme::Compressed)).unwrap();
        for (i, row) in ds.rows().enumerate() {
            assert_eq!(infer_compressed(&m, row).unwrap(), i as u64);
        }
    }

    #[test]
    fn clamp_and_constant_levels() {
        let m = CompressedTreeModel::new(6, 2, vec![Classifier::Constant(1); 3]).unwrap();
        assert_eq!(infer_compressed(&m, &[0.0, 0.0]).unwrap(), 5);
        let m = CompressedTreeModel::new(6, 2, vec![Classifier::Constant(0); 3]).unwrap();
        assert_eq!(infer_compressed(&m, &[0.0, 0.0]).unwrap(), 0);
        assert!(matches!(
            infer_compressed(&m, &[0.0]),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
        assert!(CompressedTreeModel::new(6, 2, vec![Classifier::Constant(0); 2]).is_err());
    }

    #[test]
    fn full_node_counts() {
        let cfg = full_cfg(Scheme::Full);
        let m = train_full(&separable(8, 16, 1), &cfg).unwrap();
        assert_eq!(m.nodes().keys().copied().collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());

        let m = train_full(&separable(2, 16, 1), &cfg).unwrap();
        assert_eq!(m.nodes().keys().copied().collect::<Vec<_>>(), vec![0]);

        // node 2 holds only index 4 when n = 5
        let m = train_full(&separable(5, 16, 1), &cfg).unwrap();
        assert!(!m.nodes().contains_key(&2));
        assert_eq!(m.nodes().keys().copied().collect::<Vec<_>>(), vec![0, 1, 3, 4]);
    }

    #[test]
    fn full_descent_trace() {
        let ds = separable(8, 32, 2);
        let m = train_full(&ds, &full_cfg(Scheme::Full)).unwrap();
        let trace = infer_full_traced(&m, ds.row(5)).unwrap();
        assert_eq!(trace.index, 5);
        assert_eq!(trace.path, vec![0, 2, 5, 12]);
        for (i, row) in ds.rows().enumerate() {
            let t = infer_full_traced(&m, row).unwrap();
            assert_eq!(t.index, i as u64);
            assert!(t.evaluations <= 3);
        }
    }

    #[test]
    fn full_forced_branches_reach_every_index() {
        let ds = separable(5, 32, 3);
        let m = train_full(&ds, &full_cfg(Scheme::Full)).unwrap();
        for (i, row) in ds.rows().enumerate() {
            assert_eq!(infer_full(&m, row).unwrap(), i as u64);
        }
        let t = infer_full_traced(&m, ds.row(4)).unwrap();
        assert_eq!(t.path, vec![0, 2, 5, 11]);
        assert_eq!(t.evaluations, 1);
    }

    #[test]
    fn full_model_rejects_single_sided_nodes() {
        let h = Classifier::Constant(0);
        let mut nodes = BTreeMap::new();
        nodes.insert(2u64, h);
        assert!(FullTreeModel::new(5, 4, nodes).is_err());
    }

    #[test]
    fn full_training_guard() {
        let ds = DescriptorSet::new(Array2::zeros((FULL_TRAINING_MAX_N + 1, 1))).unwrap();
        assert!(train_full(&ds, &TrainConfig::default()).is_err());
    }

    #[test]
    fn shared_subset_reuses_columns() {
        let ds = separable(32, 64, 4);
        let cfg = TrainConfig {
            dim_ratio: 0.25,
            shared_subset: true,
            ..TrainConfig::default()
        };
        let m = train_compressed(&ds, &cfg).unwrap();
        let first = m.levels()[0].as_linear().unwrap().columns().to_vec();
        assert_eq!(first.len(), 16);
        for c in m.levels() {
            assert_eq!(c.as_linear().unwrap().columns(), &first[..]);
        }
        let per_level = train_compressed(&ds, &TrainConfig { shared_subset: false, ..cfg }).unwrap();
        assert!(per_level
            .levels()
            .iter()
            .any(|c| c.as_linear().unwrap().columns() != &first[..]));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = separable(40, 32, 9);
        let cfg = TrainConfig {
            dim_ratio: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(train_compressed(&ds, &cfg).unwrap(), train_compressed(&ds, &cfg).unwrap());
        assert_eq!(train_full(&ds, &cfg).unwrap(), train_full(&ds, &cfg).unwrap());
    }

    #[test]
    fn budget_examples() {
        let huge = fit_budget(1000, 64, 1, u64::MAX / 4).unwrap();
        assert_eq!(huge.chosen_d_prime, 64);

        let min = fit_budget(1000, 64, 4, 0).unwrap_err();
        let minimum = match min {
            Error::InfeasibleBudget { minimum, .. } => minimum,
            other => panic!("{other:?}"),
        };
        let tight = fit_budget(1000, 64, 4, minimum).unwrap();
        assert_eq!(tight.chosen_d_prime, 1);
        assert_eq!(tight.predicted_bytes, minimum);
        assert!(fit_budget(1000, 64, 4, minimum - 1).is_err());
    }

    #[test]
    fn budget_plan_is_maximal() {
        let plan = fit_budget(8200, 4096, 10, 524_288).unwrap();
        assert!(plan.predicted_bytes <= 524_288);
        let sizes: Vec<usize> = vec![820; 10];
        let over = layout::regionized_bytes(&sizes, 4096, plan.chosen_d_prime + 1).unwrap();
        assert!(over > 524_288);
    }

    #[test]
    fn reduced_dim_override() {
        let cfg = TrainConfig {
            d_prime: Some(7),
            ..TrainConfig::default()
        };
        assert_eq!(cfg.reduced_dim(100).unwrap(), 7);
        assert!(cfg.reduced_dim(5).is_err());
    }
}
