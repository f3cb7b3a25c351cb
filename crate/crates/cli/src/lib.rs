//! The `btel` command line: synthesize data, train, query, evaluate and
//! inspect binary tree place encoders.
//!
//! Exit codes: 0 success, 1 configuration error, 2 I/O or corrupt file,
//! 3 infeasible storage budget.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use btel::dataset::{
    generate_synthetic, l2_normalize, load_descriptors, load_ground_truth, save_descriptors, save_ground_truth,
    DescriptorSet, FileFormat, QuerySet, SynthParams,
};
use btel::eval::{
    brute_force_nn, default_tolerances, evaluate_model, evaluate_nn, random_rows, run_experiment, EvalGrid,
    ExperimentConfig, ExperimentResults, MethodInfo,
};
use btel::io::write_atomic;
use btel::model::{ModelFile, StorageReport, StorageSize};
use btel::regions::{train_regionized, SegmentationMethod};
use btel::seqfilter::filter_sequence;
use btel::tree::{train_full, Scheme, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] btel::Error),
    #[error("{0}")]
    Config(String),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) => match e {
                btel::Error::Io { .. } | btel::Error::Parse { .. } | btel::Error::Format { .. } => EXIT_IO,
                btel::Error::InfeasibleBudget { .. } => EXIT_BUDGET,
                _ => EXIT_CONFIG,
            },
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Output(_) => EXIT_IO,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "btel", version, about = "Storage-budgeted place recognition with binary tree encoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic traversal database with matching queries.
    Synth(SynthArgs),
    /// Train a model and write it as a BTEL-MDL file.
    Train(TrainArgs),
    /// Predict a database index for every query row.
    Query(QueryArgs),
    /// Score a trained model against labelled queries.
    Eval(EvalArgs),
    /// Run a JSON-configured experiment end to end.
    Experiment(ExperimentArgs),
    /// Print a model's header, storage breakdown and invariant checks.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 0.3)]
    pub walk_sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub query_sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Database output; `.csv` selects CSV, anything else BTEL-DSC.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Compressed,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SegmentationArg {
    Changepoint,
    Uniform,
}

/// Training options as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainFileConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(default = "one")]
    pub regions: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        TrainFileConfig {
            train: TrainConfig::default(),
            regions: 1,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Database descriptors.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Fraction c of columns kept per classifier.
    #[arg(long)]
    pub dim_ratio: Option<f64>,
    #[arg(long)]
    pub d_prime: Option<usize>,
    #[arg(long)]
    pub regions: Option<usize>,
    /// Byte cap on the model file; picks the largest d' that fits.
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, value_enum)]
    pub segmentation: Option<SegmentationArg>,
    #[arg(long)]
    pub shared_subset: bool,
    /// Suppress the storage report.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Nn,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long, required_unless_present = "baseline")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub queries: PathBuf,
    /// Median filter window a; 0 disables filtering.
    #[arg(long, default_value_t = 0)]
    pub filter_window: usize,
    /// Answer with exhaustive nearest-neighbour search over --database.
    #[arg(long, value_enum, requires = "database")]
    pub baseline: Option<BaselineArg>,
    #[arg(long)]
    pub database: Option<PathBuf>,
    /// Unit-normalize query rows (use when the model was trained with --normalize).
    #[arg(long)]
    pub normalize: bool,
    /// Emit CSV with the raw and filtered prediction per query.
    #[arg(long)]
    pub verbose: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Frame tolerances: `0:80` for a range or `0,5,10` for a list.
    #[arg(long)]
    pub tolerances: Option<String>,
    /// Filter windows to evaluate; repeatable.
    #[arg(long = "filter-window", default_values_t = [0usize])]
    pub filter_windows: Vec<usize>,
    /// Also evaluate exhaustive nearest neighbour over this database.
    #[arg(long)]
    pub database: Option<PathBuf>,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub meters_per_frame: Option<f64>,
    #[arg(long)]
    pub timings: bool,
    /// Results CSV; written to standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub timings: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub model: PathBuf,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> CliResult<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Query(a) => cmd_query(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Experiment(a) => cmd_experiment(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    }
}

fn load(path: &Path) -> CliResult<DescriptorSet> {
    Ok(load_descriptors(path, FileFormat::from_path(path))?)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = btel::io::read_all(path)?;
    serde_json::from_slice(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult<()> {
    let (db, queries) = generate_synthetic(&SynthParams {
        n: args.n,
        d: args.d,
        walk_sigma: args.walk_sigma,
        query_sigma: args.query_sigma,
        seed: args.seed,
    })?;
    save_descriptors(&db, &args.out, FileFormat::from_path(&args.out))?;
    if let Some(q) = &args.queries {
        save_descriptors(&queries.descriptors, q, FileFormat::from_path(q))?;
    }
    if let Some(gt) = &args.ground_truth {
        save_ground_truth(&queries.ground_truth, gt)?;
    }
    writeln!(out, "wrote {} places of dimension {}", db.len(), db.dim())?;
    Ok(())
}

/// The training config after applying the JSON file and then the flags.
pub fn resolve_train_config(args: &TrainArgs) -> CliResult<TrainFileConfig> {
    let mut cfg = match &args.config {
        Some(path) => read_json::<TrainFileConfig>(path)?,
        None => TrainFileConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(s) = args.scheme {
        t.scheme = match s {
            SchemeArg::Compressed => Scheme::Compressed,
            SchemeArg::Full => Scheme::Full,
        };
    }
    if let Some(c) = args.dim_ratio {
        t.dim_ratio = c;
        t.d_prime = None;
    }
    if let Some(dp) = args.d_prime {
        t.d_prime = Some(dp);
    }
    if let Some(b) = args.budget {
        t.budget_bytes = Some(b);
    }
    if let Some(seed) = args.seed {
        t.svm.seed = seed;
    }
    if let Some(l) = args.lambda {
        t.svm.lambda = l;
    }
    if let Some(e) = args.epochs {
        t.svm.epochs = e;
    }
    if let Some(s) = args.sparsity {
        t.sparsity = s;
    }
    if let Some(s) = args.segmentation {
        t.segmentation = match s {
            SegmentationArg::Changepoint => SegmentationMethod::Changepoint,
            SegmentationArg::Uniform => SegmentationMethod::Uniform,
        };
    }
    t.normalize |= args.normalize;
    t.shared_subset |= args.shared_subset;
    if let Some(r) = args.regions {
        cfg.regions = r;
    }
    if cfg.regions == 0 {
        return Err(CliError::Config("--regions must be at least 1".into()));
    }
    if cfg.train.scheme == Scheme::Full && cfg.regions != 1 {
        return Err(CliError::Config("the full scheme does not support --regions above 1".into()));
    }
    Ok(cfg)
}

/// Trains the model described by a resolved config.
pub fn train_model(ds: &DescriptorSet, cfg: &TrainFileConfig) -> CliResult<ModelFile> {
    Ok(match cfg.train.scheme {
        Scheme::Compressed => train_regionized(ds, cfg.regions, &cfg.train)?.into(),
        Scheme::Full => train_full(ds, &cfg.train)?.into(),
    })
}

pub fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve_train_config(args)?;
    let ds = load(&args.data)?;
    let model = train_model(&ds, &cfg)?;
    model.save(&args.out)?;
    if !args.quiet {
        write!(out, "{}", render_summary(&model))?;
        write!(out, "{}", render_report(&model.storage_report()))?;
    }
    Ok(())
}

fn render_summary(model: &ModelFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "scheme: {}", model.scheme_name());
    let _ = writeln!(s, "N: {}", model.n());
    let _ = writeln!(s, "d: {}", model.dim());
    let _ = writeln!(s, "r: {}", model.regions());
    match model.d_prime() {
        Some(dp) => {
            let _ = writeln!(s, "d_prime: {dp}");
        }
        None => {
            let _ = writeln!(s, "d_prime: -");
        }
    }
    let _ = writeln!(s, "model_bytes: {}", model.size_bytes());
    s
}

fn render_report(report: &StorageReport) -> String {
    let mut s = String::from("storage:\n");
    for c in &report.components {
        let _ = writeln!(s, "  {:<40} {:>12}", c.name, c.bytes);
    }
    let _ = writeln!(s, "  {:<40} {:>12}", "total", report.total());
    s
}

fn maybe_normalize(ds: DescriptorSet, normalize: bool) -> CliResult<DescriptorSet> {
    Ok(if normalize { l2_normalize(&ds)? } else { ds })
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn cmd_query(args: &QueryArgs, out: &mut dyn Write) -> CliResult<()> {
    let queries = maybe_normalize(load(&args.queries)?, args.normalize)?;
    let (raw, regions): (Vec<u64>, Option<Vec<usize>>) = if args.baseline.is_some() {
        let db_path = args.database.as_ref().expect("clap enforces --database");
        let db = maybe_normalize(load(db_path)?, args.normalize)?;
        let raw = queries
            .rows()
            .map(|q| brute_force_nn(&db, q))
            .collect::<btel::Result<Vec<_>>>()?;
        (raw, None)
    } else {
        let model = ModelFile::load(args.model.as_ref().expect("clap enforces --model"))?;
        if model.dim() != queries.dim() {
            return Err(btel::Error::DimensionMismatch {
                expected: model.dim(),
                found: queries.dim(),
            }
            .into());
        }
        let raw = queries
            .rows()
            .map(|q| model.infer(q))
            .collect::<btel::Result<Vec<_>>>()?;
        let regions = match &model {
            ModelFile::Regionized(m) => Some(
                queries
                    .rows()
                    .map(|q| m.route(q))
                    .collect::<btel::Result<Vec<_>>>()?,
            ),
            ModelFile::Full(_) => None,
        };
        (raw, regions)
    };
    let filtered = filter_sequence(args.filter_window, &raw);

    let mut text = String::new();
    if args.verbose {
        text.push_str("query,raw,filtered,region\n");
        for (i, (r, f)) in raw.iter().zip(&filtered).enumerate() {
            let region = regions.as_ref().map(|g| g[i].to_string()).unwrap_or_default();
            let _ = writeln!(text, "{i},{r},{f},{region}");
        }
    } else {
        for f in &filtered {
            let _ = writeln!(text, "{f}");
        }
    }
    emit(out, args.out.as_deref(), &text)
}

/// Parses `a:b` (inclusive range) or a comma-separated list.
pub fn parse_tolerances(text: &str) -> CliResult<Vec<u64>> {
    let bad = || CliError::Config(format!("--tolerances: cannot parse `{text}`"));
    if let Some((lo, hi)) = text.split_once(':') {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        return Ok((lo..=hi).collect());
    }
    let list = text
        .split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|_| bad()))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(list)
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    model: &'a Path,
    queries: &'a Path,
    ground_truth: &'a Path,
    database: Option<&'a Path>,
    tolerances: &'a [u64],
    filter_windows: &'a [usize],
    normalize: bool,
    seed: u64,
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let tolerances = match &args.tolerances {
        Some(s) => parse_tolerances(s)?,
        None => default_tolerances(),
    };
    let model = ModelFile::load(&args.model)?;
    let qd = maybe_normalize(load(&args.queries)?, args.normalize)?;
    let meters_per_frame = args.meters_per_frame.unwrap_or(qd.meters_per_frame as f64);
    let queries = QuerySet::new(qd, load_ground_truth(&args.ground_truth)?)?;
    let grid = EvalGrid {
        tolerances: tolerances.clone(),
        filter_windows: args.filter_windows.clone(),
        meters_per_frame,
        seed: args.seed,
        record_timings: args.timings,
    };

    let mut results = ExperimentResults::new(&EvalEcho {
        model: &args.model,
        queries: &args.queries,
        ground_truth: &args.ground_truth,
        database: args.database.as_deref(),
        tolerances: &tolerances,
        filter_windows: &args.filter_windows,
        normalize: args.normalize,
        seed: args.seed,
    })?;
    let method = match model {
        ModelFile::Regionized(_) => "bte-c",
        ModelFile::Full(_) => "bte-f",
    };
    let info = MethodInfo {
        method: method.into(),
        ..MethodInfo::default()
    };
    results.results.extend(evaluate_model(&model, &info, &queries, &grid)?);
    if let Some(db_path) = &args.database {
        let db = maybe_normalize(load(db_path)?, args.normalize)?;
        results.results.extend(evaluate_nn(&db, &queries, &grid)?);
    }
    results
        .results
        .extend(random_rows(model.n(), model.dim(), &queries.ground_truth, &grid));
    results.storage.push(btel::eval::StorageEntry {
        method: method.into(),
        run: 0,
        model_bytes: model.size_bytes(),
        report: model.storage_report(),
    });
    write_results(&results, args.out.as_deref(), args.json.as_deref(), out)
}

fn write_results(
    results: &ExperimentResults,
    csv: Option<&Path>,
    json: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    match csv {
        Some(p) => results.write_csv(p)?,
        None => out.write_all(results.to_csv()?.as_bytes())?,
    }
    if let Some(p) = json {
        results.write_json(p)?;
    }
    Ok(())
}

pub fn cmd_experiment(args: &ExperimentArgs, out: &mut dyn Write) -> CliResult<()> {
    let text = btel::io::read_all(&args.config)?;
    let text = String::from_utf8(text)
        .map_err(|_| CliError::Config(format!("{}: not UTF-8", args.config.display())))?;
    let mut config = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.record_timings |= args.timings;
    let results = run_experiment(&config)?;
    write_results(&results, args.out.as_deref(), args.json.as_deref(), out)
}

pub fn cmd_inspect(args: &InspectArgs, out: &mut dyn Write) -> CliResult<()> {
    let bytes = btel::io::read_all(&args.model)?;
    let model = ModelFile::decode(&bytes)?;
    let report = model.storage_report();
    let mut s = render_summary(&model);
    let _ = writeln!(s, "file_bytes: {}", bytes.len());
    s.push_str(&render_report(&report));
    s.push_str("checks:\n");
    let coverage = match &model {
        ModelFile::Regionized(m) => {
            let b = m.segmentation().boundaries();
            b.first() == Some(&0)
                && b.last().map(|&x| x as u64) == Some(m.n())
                && m.trees().iter().zip(m.segmentation().sizes()).all(|(t, n)| t.n() == n as u64)
        }
        ModelFile::Full(_) => true,
    };
    let levels = match &model {
        ModelFile::Regionized(m) => m
            .trees()
            .iter()
            .all(|t| t.levels().len() as u32 == t.width()),
        ModelFile::Full(m) => m.nodes().keys().all(|&j| j < (1u64 << m.width()) - 1),
    };
    let size = report.total() == bytes.len() as u64 && model.size_bytes() == bytes.len() as u64;
    for (name, ok) in [
        ("partition coverage", coverage),
        ("level counts", levels),
        ("storage total equals file size", size),
    ] {
        let _ = writeln!(s, "  {name}: {}", if ok { "ok" } else { "FAILED" });
    }
    out.write_all(s.as_bytes())?;
    if coverage && levels && size {
        Ok(())
    } else {
        Err(btel::Error::Format {
            field: "model".into(),
            message: "invariant checks failed".into(),
        }
        .into())
    }
}
