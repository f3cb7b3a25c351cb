//! Contiguous map regions, one compressed tree each, routed by a multi-class SVM.
//!
//! Regions follow traversal order so that a region-local index plus the
//! region's start offset is a global index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{l2_normalize, DescriptorSet};
use crate::svm::{train_multiclass, MulticlassModel};
use crate::tree::{self, train_compressed_rows, CompressedTreeModel, TrainConfig};
use crate::{Error, Result};

/// Seed salt for the router, kept apart from the per-level seeds.
const ROUTER_TREE_ID: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SegmentationMethod {
    #[default]
    Changepoint,
    Uniform,
}

impl std::str::FromStr for SegmentationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "changepoint" => Ok(SegmentationMethod::Changepoint),
            "uniform" => Ok(SegmentationMethod::Uniform),
            other => Err(Error::invalid(
                "segmentation",
                format!("`{other}` is not one of changepoint, uniform"),
            )),
        }
    }
}

/// `r + 1` increasing boundaries from `0` to `N`; region `k` is `[b[k], b[k+1])`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    boundaries: Vec<usize>,
}

impl Segmentation {
    pub fn new(boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.len() < 2 || boundaries[0] != 0 {
            return Err(Error::invalid(
                "boundaries",
                "need at least two boundaries starting at 0",
            ));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("boundaries", "regions must be non-empty and ordered"));
        }
        Ok(Segmentation { boundaries })
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn regions(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        self.boundaries[k]..self.boundaries[k + 1]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Region id of every place.
    pub fn labels(&self) -> Vec<usize> {
        (0..self.regions())
            .flat_map(|k| std::iter::repeat_n(k, self.boundaries[k + 1] - self.boundaries[k]))
            .collect()
    }
}

/// Near-equal split; earlier regions are larger by at most one.
pub fn uniform_boundaries(n: usize, r: usize) -> Vec<usize> {
    let base = n / r;
    let extra = n % r;
    let mut out = Vec::with_capacity(r + 1);
    out.push(0);
    for k in 0..r {
        let size = base + usize::from(k < extra);
        out.push(out[k] + size);
    }
    out
}

/// Segment sums of squared deviations from the segment mean, in O(d) per query.
pub struct SegmentCost {
    dim: usize,
    /// `(N+1) x d` prefix sums of the rows
    sums: Vec<f64>,
    /// prefix sums of squared row norms
    squares: Vec<f64>,
}

impl SegmentCost {
    pub fn new(ds: &DescriptorSet) -> Self {
        let d = ds.dim();
        let mut sums = vec![0f64; (ds.len() + 1) * d];
        let mut squares = vec![0f64; ds.len() + 1];
        for (i, row) in ds.rows().enumerate() {
            let (prev, next) = sums.split_at_mut((i + 1) * d);
            let prev = &prev[i * d..];
            let next = &mut next[..d];
            let mut sq = 0f64;
            for j in 0..d {
                let v = row[j] as f64;
                next[j] = prev[j] + v;
                sq += v * v;
            }
            squares[i + 1] = squares[i] + sq;
        }
        SegmentCost {
            dim: d,
            sums,
            squares,
        }
    }

    /// SSE of rows `[start, end)`.
    pub fn cost(&self, start: usize, end: usize) -> f64 {
        let count = (end - start) as f64;
        let a = &self.sums[start * self.dim..(start + 1) * self.dim];
        let b = &self.sums[end * self.dim..(end + 1) * self.dim];
        let norm: f64 = a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum();
        (self.squares[end] - self.squares[start] - norm / count).max(0.0)
    }
}

/// Total SSE of a segmentation.
pub fn segmentation_cost(ds: &DescriptorSet, seg: &Segmentation) -> f64 {
    let cost = SegmentCost::new(ds);
    (0..seg.regions())
        .map(|k| cost.cost(seg.boundaries[k], seg.boundaries[k + 1]))
        .sum()
}

/// Splits the traversal into `r` contiguous regions.
///
/// `Changepoint` solves the optimal partition exactly by dynamic programming
/// over split points (`O(N^2 r d)` time, `O(N r)` table); ties prefer the
/// earliest split. `Uniform` uses [`uniform_boundaries`].
pub fn summarize_sequence(ds: &DescriptorSet, r: usize, method: SegmentationMethod) -> Result<Segmentation> {
    let n = ds.len();
    if r == 0 || r > n {
        return Err(Error::invalid("r", format!("{r} regions for {n} places")));
    }
    if r == 1 {
        return Segmentation::new(vec![0, n]);
    }
    match method {
        SegmentationMethod::Uniform => Segmentation::new(uniform_boundaries(n, r)),
        SegmentationMethod::Changepoint => changepoint(ds, r),
    }
}

fn changepoint(ds: &DescriptorSet, r: usize) -> Result<Segmentation> {
    let n = ds.len();
    let cost = SegmentCost::new(ds);
    // best[i] for the current k: minimal cost of splitting rows [0, i) into k segments
    let mut best: Vec<f64> = (0..=n)
        .map(|i| if i == 0 { f64::INFINITY } else { cost.cost(0, i) })
        .collect();
    let mut back = vec![vec![0usize; n + 1]; r + 1];
    for k in 2..=r {
        let prev = best;
        let row: Vec<(f64, usize)> = (0..=n)
            .into_par_iter()
            .map(|i| {
                if i < k {
                    return (f64::INFINITY, 0);
                }
                let mut best_cost = f64::INFINITY;
                let mut best_split = k - 1;
                for j in (k - 1)..i {
                    let c = prev[j] + cost.cost(j, i);
                    if c < best_cost {
                        best_cost = c;
                        best_split = j;
                    }
                }
                (best_cost, best_split)
            })
            .collect();
        best = row.iter().map(|&(c, _)| c).collect();
        back[k] = row.iter().map(|&(_, j)| j).collect();
    }
    let mut boundaries = vec![n];
    let mut end = n;
    for k in (2..=r).rev() {
        end = back[k][end];
        boundaries.push(end);
    }
    boundaries.push(0);
    boundaries.reverse();
    Segmentation::new(boundaries)
}

/// `r` compressed trees over contiguous regions plus a router (absent for `r = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct RegionizedModel {
    segmentation: Segmentation,
    router: Option<MulticlassModel>,
    trees: Vec<CompressedTreeModel>,
}

impl RegionizedModel {
    pub fn new(
        segmentation: Segmentation,
        router: Option<MulticlassModel>,
        trees: Vec<CompressedTreeModel>,
    ) -> Result<Self> {
        let r = segmentation.regions();
        if trees.len() != r {
            return Err(Error::invalid("trees", format!("{} trees for {r} regions", trees.len())));
        }
        for (k, (t, size)) in trees.iter().zip(segmentation.sizes()).enumerate() {
            if t.n() != size as u64 {
                return Err(Error::invalid(
                    "trees",
                    format!("tree {k} covers {} places but its region has {size}", t.n()),
                ));
            }
        }
        let dim = trees[0].dim();
        if trees.iter().any(|t| t.dim() != dim) {
            return Err(Error::invalid("trees", "trees disagree on descriptor dimension"));
        }
        match (&router, r) {
            (None, 1) => {}
            (Some(m), r) if r > 1 && m.classes() == r && m.dim() == dim => {}
            _ => {
                return Err(Error::invalid(
                    "router",
                    format!("router must be absent for one region and cover all {r} regions otherwise"),
                ))
            }
        }
        Ok(RegionizedModel {
            segmentation,
            router,
            trees,
        })
    }

    /// A plain compressed tree seen as a single region.
    pub fn single(tree: CompressedTreeModel) -> Self {
        let n = tree.n() as usize;
        RegionizedModel {
            segmentation: Segmentation::new(vec![0, n]).expect("n >= 1"),
            router: None,
            trees: vec![tree],
        }
    }

    pub fn segmentation(&self) -> &Segmentation {
        &self.segmentation
    }

    pub fn router(&self) -> Option<&MulticlassModel> {
        self.router.as_ref()
    }

    pub fn trees(&self) -> &[CompressedTreeModel] {
        &self.trees
    }

    pub fn regions(&self) -> usize {
        self.trees.len()
    }

    pub fn n(&self) -> u64 {
        self.segmentation.total() as u64
    }

    pub fn dim(&self) -> usize {
        self.trees[0].dim()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.segmentation.boundaries[..self.regions()]
    }

    pub fn route(&self, q: &[f32]) -> Result<usize> {
        if q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: q.len(),
            });
        }
        Ok(self.router.as_ref().map_or(0, |m| m.predict_class_unchecked(q)))
    }
}

/// Segments, trains one compressed tree per region and, for `r > 1`, the router.
///
/// With a byte budget set, `d'` is fitted to the actual region sizes.
pub fn train_regionized(ds: &DescriptorSet, r: usize, config: &TrainConfig) -> Result<RegionizedModel> {
    config.validate(ds.dim())?;
    let normalized = if config.normalize {
        Some(l2_normalize(ds)?)
    } else {
        None
    };
    let ds = normalized.as_ref().unwrap_or(ds);
    let segmentation = summarize_sequence(ds, r, config.segmentation)?;
    let d_prime = match config.budget_bytes {
        Some(budget) => tree::fit_budget_for_sizes(&segmentation.sizes(), ds.dim(), budget)?.chosen_d_prime,
        None => config.reduced_dim(ds.dim())?,
    };

    let trees = (0..r)
        .into_par_iter()
        .map(|k| train_compressed_rows(ds, segmentation.range(k), d_prime, config, k as u64))
        .collect::<Result<Vec<_>>>()?;

    let router = if r > 1 {
        let svm = config
            .svm
            .with_seed(tree::derive_seed(config.svm.seed, ROUTER_TREE_ID, 0));
        Some(train_multiclass(ds, &segmentation.labels(), r, &svm)?)
    } else {
        None
    };
    RegionizedModel::new(segmentation, router, trees)
}

/// Routed region offset plus that region's tree prediction.
pub fn infer_regionized(model: &RegionizedModel, q: &[f32]) -> Result<u64> {
    let k = model.route(q)?;
    Ok(model.offsets()[k] as u64 + model.trees[k].infer_unchecked(q))
}
