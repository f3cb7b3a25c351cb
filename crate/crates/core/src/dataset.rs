//! Descriptor databases and query streams.
//!
//! Row `i` of a [`DescriptorSet`] is map location `i`; nothing downstream ever
//! reorders rows. Values are held and serialized as `f32`.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::io::{read_all, write_atomic};
use crate::{Error, Result};

/// Magic bytes of the binary descriptor format.
pub const DESCRIPTOR_MAGIC: [u8; 8] = *b"BTELDSC\0";
pub const DESCRIPTOR_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4 + 4;

pub const DEFAULT_METERS_PER_FRAME: f32 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Binary,
    Csv,
}

impl FileFormat {
    /// `.csv` selects CSV, everything else the binary format.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FileFormat::Csv,
            _ => FileFormat::Binary,
        }
    }
}

/// Ordered `N x d` matrix of place descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    descriptors: Array2<f32>,
    pub meters_per_frame: f32,
    pub source_tag: String,
}

impl DescriptorSet {
    pub fn new(descriptors: Array2<f32>) -> Result<Self> {
        Self::with_meta(descriptors, DEFAULT_METERS_PER_FRAME, String::new())
    }

    pub fn with_meta(
        descriptors: Array2<f32>,
        meters_per_frame: f32,
        source_tag: String,
    ) -> Result<Self> {
        let (n, d) = descriptors.dim();
        if n == 0 {
            return Err(Error::invalid("descriptors", "at least one row is required"));
        }
        if d == 0 {
            return Err(Error::invalid("descriptors", "at least one column is required"));
        }
        check_finite(&descriptors)?;
        let descriptors = if descriptors.is_standard_layout() {
            descriptors
        } else {
            descriptors.as_standard_layout().into_owned()
        };
        Ok(DescriptorSet {
            descriptors,
            meters_per_frame,
            source_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.as_slice()[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.as_slice().chunks_exact(self.dim())
    }

    /// Row-major backing storage.
    pub fn as_slice(&self) -> &[f32] {
        self.descriptors
            .as_slice()
            .expect("descriptor matrix is kept in standard layout")
    }

    pub fn matrix(&self) -> &Array2<f32> {
        &self.descriptors
    }

    /// Contiguous row range `[start, end)` as a new set.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<DescriptorSet> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(
                "rows",
                format!("range {start}..{end} is empty or exceeds {} rows", self.len()),
            ));
        }
        Ok(DescriptorSet {
            descriptors: self
                .descriptors
                .slice(ndarray::s![start..end, ..])
                .to_owned(),
            meters_per_frame: self.meters_per_frame,
            source_tag: self.source_tag.clone(),
        })
    }
}

/// Queries with the true database index of each row (`-1` when unknown).
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub descriptors: DescriptorSet,
    pub ground_truth: Vec<i64>,
}

impl QuerySet {
    pub fn new(descriptors: DescriptorSet, ground_truth: Vec<i64>) -> Result<Self> {
        if ground_truth.len() != descriptors.len() {
            return Err(Error::invalid(
                "ground_truth",
                format!(
                    "{} labels for {} query rows",
                    ground_truth.len(),
                    descriptors.len()
                ),
            ));
        }
        if let Some(&bad) = ground_truth.iter().find(|&&g| g < -1) {
            return Err(Error::invalid("ground_truth", format!("label {bad} is below -1")));
        }
        Ok(QuerySet {
            descriptors,
            ground_truth,
        })
    }

    /// Checks the pairing against a database: same width, labels inside `[0, n)`.
    pub fn check_against(&self, db: &DescriptorSet) -> Result<()> {
        if self.descriptors.dim() != db.dim() {
            return Err(Error::DimensionMismatch {
                expected: db.dim(),
                found: self.descriptors.dim(),
            });
        }
        if let Some(&bad) = self
            .ground_truth
            .iter()
            .find(|&&g| g >= db.len() as i64)
        {
            return Err(Error::invalid(
                "ground_truth",
                format!("label {bad} is outside a database of {} places", db.len()),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }
}

fn check_finite(m: &Array2<f32>) -> Result<()> {
    for (row, r) in m.axis_iter(Axis(0)).enumerate() {
        if let Some(column) = r.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row, column });
        }
    }
    Ok(())
}

pub fn load_descriptors(path: &Path, format: FileFormat) -> Result<DescriptorSet> {
    match format {
        FileFormat::Binary => decode_binary(path, &read_all(path)?),
        FileFormat::Csv => load_csv(path),
    }
}

pub fn save_descriptors(ds: &DescriptorSet, path: &Path, format: FileFormat) -> Result<()> {
    let bytes = match format {
        FileFormat::Binary => encode_binary(ds),
        FileFormat::Csv => encode_csv(ds),
    };
    write_atomic(path, &bytes)
}

pub fn encode_binary(ds: &DescriptorSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * ds.as_slice().len());
    out.extend_from_slice(&DESCRIPTOR_MAGIC);
    out.extend_from_slice(&DESCRIPTOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    out.extend_from_slice(&(ds.dim() as u32).to_le_bytes());
    out.extend_from_slice(&ds.meters_per_frame.to_le_bytes());
    for v in ds.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(path: &Path, bytes: &[u8]) -> Result<DescriptorSet> {
    let err = |offset: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("byte {offset}"),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(
            bytes.len(),
            format!("file is {} bytes, shorter than the {HEADER_LEN}-byte header", bytes.len()),
        ));
    }
    if bytes[..8] != DESCRIPTOR_MAGIC {
        return Err(err(0, "bad magic; not a BTEL-DSC file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DESCRIPTOR_VERSION {
        return Err(err(8, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let d = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as u64;
    let meters_per_frame = f32::from_le_bytes(bytes[24..28].try_into().unwrap());
    if n == 0 {
        return Err(err(12, "row count is zero".into()));
    }
    if d == 0 {
        return Err(err(20, "dimension is zero".into()));
    }
    if !meters_per_frame.is_finite() {
        return Err(err(24, "meters_per_frame is not finite".into()));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN as u64));
    if expected != Some(bytes.len() as u64) {
        return Err(err(
            bytes.len().min(HEADER_LEN),
            format!(
                "header declares {n} x {d} values but the payload is {} bytes",
                bytes.len() - HEADER_LEN
            ),
        ));
    }
    let (n, d) = (n as usize, d as usize);
    let mut values = Vec::with_capacity(n * d);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(err(
                HEADER_LEN + 4 * k,
                format!("non-finite value at row {}, column {}", k / d, k % d),
            ));
        }
        values.push(v);
    }
    let m = Array2::from_shape_vec((n, d), values).expect("shape checked above");
    DescriptorSet::with_meta(m, meters_per_frame, path.display().to_string())
}

fn load_csv(path: &Path) -> Result<DescriptorSet> {
    let parse_err = |line: u64, message: String| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {line}"),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => parse_err(0, format!("{other:?}")),
        })?;
    let mut values = Vec::new();
    let mut d = 0usize;
    let mut n = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            match e.kind() {
                csv::ErrorKind::UnequalLengths {
                    expected_len, len, ..
                } => parse_err(line, format!("expected {expected_len} fields, found {len}")),
                _ => parse_err(line, e.to_string()),
            }
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(n as u64 + 1);
        if n == 0 {
            d = record.len();
        }
        for field in record.iter() {
            let v: f32 = field
                .parse()
                .map_err(|_| parse_err(line, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value `{field}`")));
            }
            values.push(v);
        }
        n += 1;
    }
    if n == 0 || d == 0 {
        return Err(parse_err(1, "no descriptor rows".into()));
    }
    let m = Array2::from_shape_vec((n, d), values).expect("rows have equal length");
    DescriptorSet::with_meta(m, DEFAULT_METERS_PER_FRAME, path.display().to_string())
}

fn encode_csv(ds: &DescriptorSet) -> Vec<u8> {
    let mut out = String::new();
    for row in ds.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out.into_bytes()
}

/// Ground truth file: one integer per line.
pub fn load_ground_truth(path: &Path) -> Result<Vec<i64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<i64>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", i + 1),
                message: format!("`{}` is not an integer", l.trim()),
            })
        })
        .collect()
}

pub fn save_ground_truth(gt: &[i64], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(gt.len() * 6);
    for g in gt {
        out.push_str(&g.to_string());
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Parameters of the synthetic traversal generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthParams {
    pub n: usize,
    pub d: usize,
    pub walk_sigma: f64,
    pub query_sigma: f64,
    pub seed: u64,
}

/// Smooth random-walk database plus one noisy query per place.
///
/// Each database row is the unit-normalized previous row plus a Gaussian step;
/// query `i` is database row `i` plus Gaussian noise, renormalized. With
/// `query_sigma == 0` queries are exact copies.
pub fn generate_synthetic(params: &SynthParams) -> Result<(DescriptorSet, QuerySet)> {
    let SynthParams {
        n,
        d,
        walk_sigma,
        query_sigma,
        seed,
    } = *params;
    if n == 0 || d == 0 {
        return Err(Error::invalid("n/d", "both must be at least 1"));
    }
    if !(walk_sigma >= 0.0 && walk_sigma.is_finite()) {
        return Err(Error::invalid("walk_sigma", "must be finite and non-negative"));
    }
    if !(query_sigma >= 0.0 && query_sigma.is_finite()) {
        return Err(Error::invalid("query_sigma", "must be finite and non-negative"));
    }

    let mut walk_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut query_rng = ChaCha8Rng::seed_from_u64(seed);
    query_rng.set_stream(1);

    let mut db = Vec::with_capacity(n * d);
    let mut current: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut walk_rng)).collect();
    normalize_f64(&mut current);
    for i in 0..n {
        if i > 0 {
            for v in current.iter_mut() {
                let step: f64 = StandardNormal.sample(&mut walk_rng);
                *v += walk_sigma * step;
            }
            normalize_f64(&mut current);
        }
        db.extend(current.iter().map(|&v| v as f32));
    }

    let mut queries = Vec::with_capacity(n * d);
    let mut scratch = vec![0f64; d];
    for row in db.chunks_exact(d) {
        if query_sigma == 0.0 {
            queries.extend_from_slice(row);
            continue;
        }
        for (s, &v) in scratch.iter_mut().zip(row) {
            let noise: f64 = StandardNormal.sample(&mut query_rng);
            *s = v as f64 + query_sigma * noise;
        }
        normalize_f64(&mut scratch);
        queries.extend(scratch.iter().map(|&v| v as f32));
    }

    let tag = format!("synthetic(n={n},d={d},walk={walk_sigma},query={query_sigma},seed={seed})");
    let db = DescriptorSet::with_meta(
        Array2::from_shape_vec((n, d), db).unwrap(),
        DEFAULT_METERS_PER_FRAME,
        tag.clone(),
    )?;
    let q = DescriptorSet::with_meta(
        Array2::from_shape_vec((n, d), queries).unwrap(),
        DEFAULT_METERS_PER_FRAME,
        tag,
    )?;
    let gt = (0..n as i64).collect();
    Ok((db, QuerySet::new(q, gt)?))
}

fn normalize_f64(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(ds: &DescriptorSet) -> Result<DescriptorSet> {
    let mut m = ds.descriptors.clone();
    for (row, mut r) in m.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row_norm(r.view());
        if norm == 0.0 {
            return Err(Error::ZeroRow { row });
        }
        r.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    Ok(DescriptorSet {
        descriptors: m,
        meters_per_frame: ds.meters_per_frame,
        source_tag: ds.source_tag.clone(),
    })
}

fn row_norm(r: ArrayView1<f32>) -> f64 {
    r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}
