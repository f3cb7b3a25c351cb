//! Baselines, recall curves, storage accounting and experiment runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_synthetic, l2_normalize, load_descriptors, load_ground_truth, DescriptorSet, FileFormat, QuerySet,
    SynthParams,
};
use crate::io::write_atomic;
use crate::model::{ModelFile, StorageReport, StorageSize};
use crate::regions::train_regionized;
use crate::seqfilter::filter_sequence;
use crate::tree::{train_full, Scheme, TrainConfig};
use crate::{Error, Result};

pub const RESULTS_FORMAT_VERSION: u32 = 1;

/// Index of the database row closest to `q` in Euclidean distance, lowest
/// index on ties.
pub fn brute_force_nn(ds: &DescriptorSet, q: &[f32]) -> Result<u64> {
    if q.len() != ds.dim() {
        return Err(Error::DimensionMismatch {
            expected: ds.dim(),
            found: q.len(),
        });
    }
    let mut best = (f64::INFINITY, 0u64);
    for (i, row) in ds.rows().enumerate() {
        let dist: f64 = row
            .iter()
            .zip(q)
            .map(|(&x, &y)| {
                let diff = x as f64 - y as f64;
                diff * diff
            })
            .sum();
        if dist < best.0 {
            best = (dist, i as u64);
        }
    }
    Ok(best.1)
}

/// Fraction of localized queries per frame tolerance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallCurve {
    pub tolerances: Vec<u64>,
    pub recalls: Vec<f64>,
    pub meters_per_frame: f64,
}

impl RecallCurve {
    pub fn at(&self, t: u64) -> Option<f64> {
        self.tolerances
            .binary_search(&t)
            .ok()
            .map(|i| self.recalls[i])
    }

    pub fn meters(&self) -> Vec<f64> {
        self.tolerances
            .iter()
            .map(|&t| t as f64 * self.meters_per_frame)
            .collect()
    }
}

/// Recall at each tolerance: a query counts when `|pred - gt| <= t`.
///
/// Queries with ground truth `-1` are left out. Tolerances are sorted and
/// deduplicated.
pub fn recall_curve(
    predictions: &[u64],
    ground_truth: &[i64],
    tolerances: &[u64],
    meters_per_frame: f64,
) -> Result<RecallCurve> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::invalid(
            "predictions",
            format!(
                "{} predictions for {} ground-truth entries",
                predictions.len(),
                ground_truth.len()
            ),
        ));
    }
    let errors: Vec<u64> = predictions
        .iter()
        .zip(ground_truth)
        .filter(|(_, &g)| g >= 0)
        .map(|(&p, &g)| p.abs_diff(g as u64))
        .collect();
    if errors.is_empty() {
        return Err(Error::invalid("ground_truth", "no query has a known location"));
    }
    let mut tolerances = tolerances.to_vec();
    tolerances.sort_unstable();
    tolerances.dedup();
    let total = errors.len() as f64;
    let recalls = tolerances
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e <= t).count() as f64 / total)
        .collect();
    Ok(RecallCurve {
        tolerances,
        recalls,
        meters_per_frame,
    })
}

/// Expected recall@t of a predictor drawing uniformly from `[0, n)`.
pub fn random_baseline_recall(n: u64, ground_truth: &[i64], t: u64) -> f64 {
    let labeled: Vec<u64> = ground_truth
        .iter()
        .filter(|&&g| g >= 0)
        .map(|&g| g as u64)
        .collect();
    if labeled.is_empty() || n == 0 {
        return 0.0;
    }
    let hits: f64 = labeled
        .iter()
        .map(|&g| {
            let lo = g.saturating_sub(t);
            let hi = g.saturating_add(t).min(n - 1);
            (hi - lo + 1) as f64 / n as f64
        })
        .sum();
    hits / labeled.len() as f64
}

/// Per-component byte breakdown summing to the serialized size.
pub fn storage_report(model: &ModelFile) -> StorageReport {
    model.storage_report()
}

/// Where an experiment gets its database and queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        n: usize,
        d: usize,
        walk_sigma: f64,
        query_sigma: f64,
        seed: u64,
    },
    Files {
        database: PathBuf,
        queries: PathBuf,
        ground_truth: PathBuf,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<(DescriptorSet, QuerySet)> {
        match self {
            &DataSource::Synthetic {
                n,
                d,
                walk_sigma,
                query_sigma,
                seed,
            } => generate_synthetic(&SynthParams {
                n,
                d,
                walk_sigma,
                query_sigma,
                seed,
            }),
            DataSource::Files {
                database,
                queries,
                ground_truth,
            } => {
                let db = load_descriptors(database, FileFormat::from_path(database))?;
                let q = load_descriptors(queries, FileFormat::from_path(queries))?;
                let qs = QuerySet::new(q, load_ground_truth(ground_truth)?)?;
                qs.check_against(&db)?;
                Ok((db, qs))
            }
        }
    }
}

/// One trained configuration within an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub scheme: Scheme,
    pub dim_ratio: f64,
    pub d_prime: Option<usize>,
    pub regions: usize,
    pub budget_bytes: Option<u64>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            scheme: Scheme::Compressed,
            dim_ratio: crate::featsel::DEFAULT_DIM_RATIO,
            d_prime: None,
            regions: 1,
            budget_bytes: None,
        }
    }
}

impl RunSpec {
    pub fn method_name(&self) -> &'static str {
        match self.scheme {
            Scheme::Compressed => "bte-c",
            Scheme::Full => "bte-f",
        }
    }
}

pub fn default_tolerances() -> Vec<u64> {
    (0..=80).collect()
}

fn default_filter_windows() -> Vec<usize> {
    vec![0]
}

fn default_runs() -> Vec<RunSpec> {
    vec![RunSpec::default()]
}

fn yes() -> bool {
    true
}

/// A full experiment: data, shared training options, the runs to compare and
/// the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Options shared by every run; each run overrides scheme, `c`, `d'`,
    /// regions and budget.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_runs")]
    pub runs: Vec<RunSpec>,
    #[serde(default = "default_filter_windows")]
    pub filter_windows: Vec<usize>,
    #[serde(default = "default_tolerances")]
    pub tolerances: Vec<u64>,
    #[serde(default = "yes")]
    pub nn_baseline: bool,
    #[serde(default = "yes")]
    pub random_baseline: bool,
    /// Fill the timing columns. Off by default so results are byte-stable.
    #[serde(default)]
    pub record_timings: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(data: DataSource) -> Self {
        ExperimentConfig {
            data,
            train: TrainConfig::default(),
            runs: default_runs(),
            filter_windows: default_filter_windows(),
            tolerances: default_tolerances(),
            nn_baseline: true,
            random_baseline: true,
            record_timings: false,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() && !self.nn_baseline && !self.random_baseline {
            return Err(Error::invalid("runs", "nothing to evaluate"));
        }
        if self.tolerances.is_empty() {
            return Err(Error::invalid("tolerances", "at least one tolerance is required"));
        }
        if self.filter_windows.is_empty() {
            return Err(Error::invalid("filter_windows", "use [0] to disable filtering"));
        }
        for run in &self.runs {
            if run.regions == 0 {
                return Err(Error::invalid("runs.regions", "must be at least 1"));
            }
            if run.scheme == Scheme::Full && (run.regions != 1 || run.budget_bytes.is_some()) {
                return Err(Error::invalid(
                    "runs.scheme",
                    "the full scheme takes neither regions nor a byte budget",
                ));
            }
        }
        Ok(())
    }

    fn train_config(&self, run: &RunSpec) -> TrainConfig {
        TrainConfig {
            scheme: run.scheme,
            dim_ratio: run.dim_ratio,
            d_prime: run.d_prime,
            budget_bytes: run.budget_bytes,
            svm: self.train.svm.with_seed(self.seed),
            ..self.train.clone()
        }
    }
}

/// One CSV line: a method at one filter window and tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub d: usize,
    pub d_prime: Option<usize>,
    pub r: Option<usize>,
    pub budget_bytes: Option<u64>,
    pub model_bytes: Option<u64>,
    pub filter_window: usize,
    pub tolerance_frames: u64,
    pub tolerance_meters: f64,
    pub recall: f64,
    pub train_seconds: Option<f64>,
    pub query_microseconds_mean: Option<f64>,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "method",
    "N",
    "d",
    "d_prime",
    "r",
    "budget_bytes",
    "model_bytes",
    "filter_window",
    "tolerance_frames",
    "tolerance_meters",
    "recall",
    "train_seconds",
    "query_microseconds_mean",
    "seed",
];

/// Storage breakdown of one trained run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StorageEntry {
    pub method: String,
    pub run: usize,
    pub model_bytes: u64,
    pub report: StorageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub format_version: u32,
    pub config: serde_json::Value,
}

/// Everything an experiment or evaluation produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResults {
    pub metadata: Metadata,
    pub results: Vec<ResultRow>,
    pub storage: Vec<StorageEntry>,
}

impl ExperimentResults {
    pub fn new(config: &impl Serialize) -> Result<Self> {
        Ok(ExperimentResults {
            metadata: Metadata {
                format_version: RESULTS_FORMAT_VERSION,
                config: serde_json::to_value(config).map_err(|e| Error::invalid("config", e.to_string()))?,
            },
            results: Vec::new(),
            storage: Vec::new(),
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.results.is_empty() {
            w.write_record(CSV_COLUMNS)
                .map_err(|e| Error::invalid("results", e.to_string()))?;
        }
        for row in &self.results {
            w.serialize(row)
                .map_err(|e| Error::invalid("results", e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::invalid("results", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid("results", e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Recall of `method` at a filter window and tolerance, first match.
    pub fn recall(&self, method: &str, filter_window: usize, tolerance: u64) -> Option<f64> {
        self.results
            .iter()
            .find(|r| r.method == method && r.filter_window == filter_window && r.tolerance_frames == tolerance)
            .map(|r| r.recall)
    }
}

/// Static columns shared by every row of one method.
#[derive(Debug, Clone, Default)]
pub struct MethodInfo {
    pub method: String,
    pub d_prime: Option<usize>,
    pub r: Option<usize>,
    pub budget_bytes: Option<u64>,
    pub model_bytes: Option<u64>,
    pub train_seconds: Option<f64>,
}

/// The evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    pub tolerances: Vec<u64>,
    pub filter_windows: Vec<usize>,
    pub meters_per_frame: f64,
    pub seed: u64,
    pub record_timings: bool,
}

/// Predicts every query, in parallel unless timings are requested.
pub fn predict_all<F>(queries: &DescriptorSet, timed: bool, predict: F) -> Result<(Vec<u64>, Option<f64>)>
where
    F: Fn(&[f32]) -> Result<u64> + Sync,
{
    if timed {
        let start = Instant::now();
        let preds = queries.rows().map(&predict).collect::<Result<Vec<_>>>()?;
        let micros = start.elapsed().as_secs_f64() * 1e6 / queries.len() as f64;
        Ok((preds, Some(micros)))
    } else {
        let rows: Vec<&[f32]> = queries.rows().collect();
        let preds = rows.par_iter().map(|q| predict(q)).collect::<Result<Vec<_>>>()?;
        Ok((preds, None))
    }
}

/// Rows for one method: every filter window times every tolerance.
pub fn method_rows(
    info: &MethodInfo,
    n: u64,
    d: usize,
    predictions: &[u64],
    query_micros: Option<f64>,
    ground_truth: &[i64],
    grid: &EvalGrid,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &a in &grid.filter_windows {
        let filtered = filter_sequence(a, predictions);
        let curve = recall_curve(&filtered, ground_truth, &grid.tolerances, grid.meters_per_frame)?;
        for (&t, &recall) in curve.tolerances.iter().zip(&curve.recalls) {
            rows.push(ResultRow {
                method: info.method.clone(),
                n,
                d,
                d_prime: info.d_prime,
                r: info.r,
                budget_bytes: info.budget_bytes,
                model_bytes: info.model_bytes,
                filter_window: a,
                tolerance_frames: t,
                tolerance_meters: t as f64 * grid.meters_per_frame,
                recall,
                train_seconds: info.train_seconds,
                query_microseconds_mean: query_micros,
                seed: grid.seed,
            });
        }
    }
    Ok(rows)
}

/// Rows for a trained model on a labelled query set.
pub fn evaluate_model(
    model: &ModelFile,
    info: &MethodInfo,
    queries: &QuerySet,
    grid: &EvalGrid,
) -> Result<Vec<ResultRow>> {
    if queries.descriptors.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: queries.descriptors.dim(),
        });
    }
    if let Some(&bad) = queries.ground_truth.iter().find(|&&g| g >= model.n() as i64) {
        return Err(Error::invalid(
            "ground_truth",
            format!("label {bad} is outside a model of {} places", model.n()),
        ));
    }
    let (preds, micros) = predict_all(&queries.descriptors, grid.record_timings, |q| model.infer(q))?;
    let info = MethodInfo {
        d_prime: info.d_prime.or(model.d_prime()),
        r: info.r.or(Some(model.regions())),
        model_bytes: Some(model.size_bytes()),
        ..info.clone()
    };
    method_rows(&info, model.n(), model.dim(), &preds, micros, &queries.ground_truth, grid)
}

/// Rows for the exhaustive nearest-neighbour baseline.
pub fn evaluate_nn(db: &DescriptorSet, queries: &QuerySet, grid: &EvalGrid) -> Result<Vec<ResultRow>> {
    queries.check_against(db)?;
    let (preds, micros) = predict_all(&queries.descriptors, grid.record_timings, |q| brute_force_nn(db, q))?;
    let info = MethodInfo {
        method: "nn".into(),
        d_prime: Some(db.dim()),
        r: Some(1),
        model_bytes: Some(db.as_slice().len() as u64 * 4),
        ..MethodInfo::default()
    };
    method_rows(&info, db.len() as u64, db.dim(), &preds, micros, &queries.ground_truth, grid)
}

/// Rows for the analytic uniform-random predictor, unfiltered.
pub fn random_rows(n: u64, d: usize, ground_truth: &[i64], grid: &EvalGrid) -> Vec<ResultRow> {
    let mut tolerances = grid.tolerances.clone();
    tolerances.sort_unstable();
    tolerances.dedup();
    tolerances
        .into_iter()
        .map(|t| ResultRow {
            method: "random".into(),
            n,
            d,
            d_prime: None,
            r: None,
            budget_bytes: None,
            model_bytes: None,
            filter_window: 0,
            tolerance_frames: t,
            tolerance_meters: t as f64 * grid.meters_per_frame,
            recall: random_baseline_recall(n, ground_truth, t),
            train_seconds: None,
            query_microseconds_mean: None,
            seed: grid.seed,
        })
        .collect()
}

/// Trains every run of the config and evaluates it next to the baselines.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResults> {
    config.validate()?;
    let (db, queries) = config.data.load()?;
    let (db, queries) = if config.train.normalize {
        let q = QuerySet::new(l2_normalize(&queries.descriptors)?, queries.ground_truth.clone())?;
        (l2_normalize(&db)?, q)
    } else {
        (db, queries)
    };
    queries.check_against(&db)?;

    let grid = EvalGrid {
        tolerances: config.tolerances.clone(),
        filter_windows: config.filter_windows.clone(),
        meters_per_frame: db.meters_per_frame as f64,
        seed: config.seed,
        record_timings: config.record_timings,
    };
    let mut out = ExperimentResults::new(config)?;

    for (i, run) in config.runs.iter().enumerate() {
        // the data is already normalized above
        let train = TrainConfig {
            normalize: false,
            ..config.train_config(run)
        };
        let start = Instant::now();
        let model: ModelFile = match run.scheme {
            Scheme::Compressed => train_regionized(&db, run.regions, &train)?.into(),
            Scheme::Full => train_full(&db, &train)?.into(),
        };
        let train_seconds = config.record_timings.then(|| start.elapsed().as_secs_f64());
        let info = MethodInfo {
            method: run.method_name().into(),
            budget_bytes: run.budget_bytes,
            train_seconds,
            ..MethodInfo::default()
        };
        out.results.extend(evaluate_model(&model, &info, &queries, &grid)?);
        out.storage.push(StorageEntry {
            method: info.method,
            run: i,
            model_bytes: model.size_bytes(),
            report: model.storage_report(),
        });
    }
    if config.nn_baseline {
        out.results.extend(evaluate_nn(&db, &queries, &grid)?);
    }
    if config.random_baseline {
        out.results.extend(random_rows(db.len() as u64, db.dim(), &queries.ground_truth, &grid));
    }
    Ok(out)
}
