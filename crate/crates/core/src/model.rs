//! Canonical `BTEL-MDL` model files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8   "BTELMDL\0"
//! version    u32 = 1
//! scheme     u8  0 = compressed/regionized, 1 = full
//! N          u64
//! d          u32
//! r          u32
//! boundaries (r+1) x u64
//! router     r x (d x f32 weights, f32 bias)          only when r > 1
//!
//! scheme 0, per region:  n u64, b u8, b x classifier
//! scheme 1:              b u8, count u64, count x (node u64, classifier)
//!
//! classifier: kind u8
//!   0 constant:   bit u8
//!   1 hyperplane: d' u32, d' x u32 column ids, d' x f32 weights, f32 bias
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::bitcodec::bits_required;
use crate::io::{read_all, write_atomic};
use crate::regions::{infer_regionized, RegionizedModel, Segmentation};
use crate::svm::{Classifier, Hyperplane, MulticlassModel};
use crate::tree::{infer_full, CompressedTreeModel, FullTreeModel};
use crate::{Error, Result};

pub const MODEL_MAGIC: [u8; 8] = *b"BTELMDL\0";
pub const MODEL_VERSION: u32 = 1;

const KIND_CONSTANT: u8 = 0;
const KIND_HYPERPLANE: u8 = 1;
const SCHEME_REGIONIZED: u8 = 0;
const SCHEME_FULL: u8 = 1;

/// Closed-form byte counts of the canonical layout.
pub mod layout {
    use crate::bitcodec::bits_required;
    use crate::Result;

    pub const HEADER: u64 = 8 + 4 + 1 + 8 + 4 + 4;
    pub const REGION_HEADER: u64 = 8 + 1;
    pub const FULL_TREE_HEADER: u64 = 1 + 8;
    pub const NODE_INDEX: u64 = 8;
    pub const CONSTANT: u64 = 2;

    pub fn boundaries(r: usize) -> u64 {
        8 * (r as u64 + 1)
    }

    pub fn router(r: usize, d: usize) -> u64 {
        if r > 1 {
            r as u64 * (4 * d as u64 + 4)
        } else {
            0
        }
    }

    pub fn hyperplane(d_prime: usize) -> u64 {
        1 + 4 + 8 * d_prime as u64 + 4
    }

    /// Size of a regionized model whose every non-singleton level is a
    /// hyperplane over `d_prime` columns.
    pub fn regionized_bytes(region_sizes: &[usize], d: usize, d_prime: usize) -> Result<u64> {
        let r = region_sizes.len();
        let mut total = HEADER + boundaries(r) + router(r, d);
        for &n in region_sizes {
            let b = bits_required(n as u64)? as u64;
            total += REGION_HEADER;
            total += if n >= 2 { b * hyperplane(d_prime) } else { b * CONSTANT };
        }
        Ok(total)
    }
}

fn classifier_bytes(c: &Classifier) -> u64 {
    match c {
        Classifier::Constant(_) => layout::CONSTANT,
        Classifier::Linear(h) => layout::hyperplane(h.reduced_dim()),
    }
}

/// Exact serialized size, computed from the model structure.
pub trait StorageSize {
    fn size_bytes(&self) -> u64;
}

impl StorageSize for RegionizedModel {
    fn size_bytes(&self) -> u64 {
        let r = self.regions();
        layout::HEADER
            + layout::boundaries(r)
            + layout::router(r, self.dim())
            + self
                .trees()
                .iter()
                .map(|t| layout::REGION_HEADER + t.levels().iter().map(classifier_bytes).sum::<u64>())
                .sum::<u64>()
    }
}

impl StorageSize for CompressedTreeModel {
    fn size_bytes(&self) -> u64 {
        layout::HEADER
            + layout::boundaries(1)
            + layout::REGION_HEADER
            + self.levels().iter().map(classifier_bytes).sum::<u64>()
    }
}

impl StorageSize for FullTreeModel {
    fn size_bytes(&self) -> u64 {
        layout::HEADER
            + layout::boundaries(1)
            + layout::FULL_TREE_HEADER
            + self
                .nodes()
                .values()
                .map(|c| layout::NODE_INDEX + classifier_bytes(c))
                .sum::<u64>()
    }
}

impl StorageSize for ModelFile {
    fn size_bytes(&self) -> u64 {
        match self {
            ModelFile::Regionized(m) => m.size_bytes(),
            ModelFile::Full(m) => m.size_bytes(),
        }
    }
}

/// Byte count of the canonical serialization of any model.
pub fn model_size_bytes(model: &impl StorageSize) -> u64 {
    model.size_bytes()
}

/// Any model that can be written to a `BTEL-MDL` file.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelFile {
    Regionized(RegionizedModel),
    Full(FullTreeModel),
}

impl From<RegionizedModel> for ModelFile {
    fn from(m: RegionizedModel) -> Self {
        ModelFile::Regionized(m)
    }
}

impl From<CompressedTreeModel> for ModelFile {
    fn from(m: CompressedTreeModel) -> Self {
        ModelFile::Regionized(RegionizedModel::single(m))
    }
}

impl From<FullTreeModel> for ModelFile {
    fn from(m: FullTreeModel) -> Self {
        ModelFile::Full(m)
    }
}

impl ModelFile {
    pub fn n(&self) -> u64 {
        match self {
            ModelFile::Regionized(m) => m.n(),
            ModelFile::Full(m) => m.n(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ModelFile::Regionized(m) => m.dim(),
            ModelFile::Full(m) => m.dim(),
        }
    }

    pub fn regions(&self) -> usize {
        match self {
            ModelFile::Regionized(m) => m.regions(),
            ModelFile::Full(_) => 1,
        }
    }

    /// Reduced dimension of the first hyperplane, `None` if every split is constant.
    pub fn d_prime(&self) -> Option<usize> {
        fn first<'a>(mut cs: impl Iterator<Item = &'a Classifier>) -> Option<usize> {
            cs.find_map(|c| c.as_linear().map(Hyperplane::reduced_dim))
        }
        match self {
            ModelFile::Regionized(m) => first(m.trees().iter().flat_map(|t| t.levels())),
            ModelFile::Full(m) => first(m.nodes().values()),
        }
    }

    pub fn scheme_name(&self) -> &'static str {
        match self {
            ModelFile::Regionized(_) => "compressed",
            ModelFile::Full(_) => "full",
        }
    }

    pub fn infer(&self, q: &[f32]) -> Result<u64> {
        match self {
            ModelFile::Regionized(m) => infer_regionized(m, q),
            ModelFile::Full(m) => infer_full(m, q),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.size_bytes() as usize);
        w.bytes(&MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        match self {
            ModelFile::Regionized(m) => {
                w.u8(SCHEME_REGIONIZED);
                w.u64(m.n());
                w.u32(m.dim() as u32);
                w.u32(m.regions() as u32);
                for &b in m.segmentation().boundaries() {
                    w.u64(b as u64);
                }
                if let Some(router) = m.router() {
                    for h in router.hyperplanes() {
                        h.weights().iter().for_each(|&v| w.f32(v));
                        w.f32(h.bias());
                    }
                }
                for t in m.trees() {
                    w.u64(t.n());
                    w.u8(t.width() as u8);
                    t.levels().iter().for_each(|c| w.classifier(c));
                }
            }
            ModelFile::Full(m) => {
                w.u8(SCHEME_FULL);
                w.u64(m.n());
                w.u32(m.dim() as u32);
                w.u32(1);
                w.u64(0);
                w.u64(m.n());
                w.u8(m.width() as u8);
                w.u64(m.nodes().len() as u64);
                for (&j, c) in m.nodes() {
                    w.u64(j);
                    w.classifier(c);
                }
            }
        }
        debug_assert_eq!(w.buf.len() as u64, self.size_bytes());
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MODEL_MAGIC {
            return Err(Error::format("magic", "not a BTEL-MDL file"));
        }
        let version = r.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::format("version", format!("unsupported version {version}")));
        }
        let scheme = r.u8("scheme")?;
        let n = r.u64("N")?;
        if n == 0 {
            return Err(Error::format("N", "model covers no places"));
        }
        let d = r.u32("d")? as usize;
        if d == 0 {
            return Err(Error::format("d", "dimension is zero"));
        }
        let regions = r.u32("r")? as usize;
        if regions == 0 || regions as u64 > n {
            return Err(Error::format("r", format!("{regions} regions for {n} places")));
        }
        let mut boundaries = Vec::with_capacity(regions + 1);
        for k in 0..=regions {
            boundaries.push(r.u64(&format!("boundaries[{k}]"))? as usize);
        }
        if *boundaries.last().unwrap() as u64 != n {
            return Err(Error::format("boundaries", "last boundary differs from N"));
        }
        let segmentation =
            Segmentation::new(boundaries).map_err(|e| Error::format("boundaries", e.to_string()))?;

        let model = match scheme {
            SCHEME_REGIONIZED => {
                let router = if regions > 1 {
                    let mut per_class = Vec::with_capacity(regions);
                    for k in 0..regions {
                        let field = format!("router[{k}]");
                        let weights = r.f32s(d, &field)?;
                        let bias = r.f32(&field)?;
                        per_class.push(
                            Hyperplane::new(weights, bias, (0..d as u32).collect())
                                .map_err(|e| Error::format(&field, e.to_string()))?,
                        );
                    }
                    Some(MulticlassModel::new(per_class, d).map_err(|e| Error::format("router", e.to_string()))?)
                } else {
                    None
                };
                let mut trees = Vec::with_capacity(regions);
                for (k, size) in segmentation.sizes().into_iter().enumerate() {
                    let field = format!("region[{k}]");
                    let rn = r.u64(&format!("{field}.n"))?;
                    if rn != size as u64 {
                        return Err(Error::format(
                            format!("{field}.n"),
                            format!("{rn} places but the boundaries give {size}"),
                        ));
                    }
                    let b = r.u8(&format!("{field}.b"))? as u32;
                    if b != bits_required(rn)? {
                        return Err(Error::format(format!("{field}.b"), format!("{b} bits for {rn} places")));
                    }
                    let levels = (1..=b)
                        .map(|j| r.classifier(d, &format!("{field}.level[{j}]")))
                        .collect::<Result<Vec<_>>>()?;
                    trees.push(
                        CompressedTreeModel::new(rn, d, levels).map_err(|e| Error::format(&field, e.to_string()))?,
                    );
                }
                ModelFile::Regionized(
                    RegionizedModel::new(segmentation, router, trees)
                        .map_err(|e| Error::format("regions", e.to_string()))?,
                )
            }
            SCHEME_FULL => {
                if regions != 1 {
                    return Err(Error::format("r", "full-scheme models have one region"));
                }
                let b = r.u8("tree.b")? as u32;
                if b != bits_required(n)? {
                    return Err(Error::format("tree.b", format!("{b} bits for {n} places")));
                }
                let count = r.u64("tree.count")?;
                if count >= 1u64 << b {
                    return Err(Error::format("tree.count", format!("{count} nodes in a {b}-bit tree")));
                }
                let mut nodes = BTreeMap::new();
                for i in 0..count {
                    let j = r.u64(&format!("node[{i}].index"))?;
                    let c = r.classifier(d, &format!("node[{i}]"))?;
                    if nodes.insert(j, c).is_some() {
                        return Err(Error::format(format!("node[{i}].index"), format!("node {j} repeated")));
                    }
                }
                ModelFile::Full(FullTreeModel::new(n, d, nodes).map_err(|e| Error::format("nodes", e.to_string()))?)
            }
            other => return Err(Error::format("scheme", format!("unknown scheme tag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::format(
                "trailer",
                format!("{} unexpected bytes after the model", bytes.len() - r.pos),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<ModelFile> {
        Self::decode(&read_all(path)?)
    }

    pub fn storage_report(&self) -> StorageReport {
        let mut report = StorageReport::default();
        report.push("header", layout::HEADER);
        report.push("segmentation", layout::boundaries(self.regions()));
        match self {
            ModelFile::Regionized(m) => {
                report.push("router", layout::router(m.regions(), m.dim()));
                for (k, t) in m.trees().iter().enumerate() {
                    report.push(format!("region[{k}].header"), layout::REGION_HEADER);
                    for (j, c) in t.levels().iter().enumerate() {
                        report.classifier(&format!("region[{k}].level[{}]", j + 1), c);
                    }
                }
            }
            ModelFile::Full(m) => {
                report.push("router", 0);
                report.push("tree.header", layout::FULL_TREE_HEADER);
                for (j, c) in m.nodes() {
                    report.push(format!("node[{j}].index"), layout::NODE_INDEX);
                    report.classifier(&format!("node[{j}]"), c);
                }
            }
        }
        report
    }
}

/// One named slice of a model file.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct StorageComponent {
    pub name: String,
    pub bytes: u64,
}

/// Per-component byte breakdown of a model file.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct StorageReport {
    pub components: Vec<StorageComponent>,
}

impl StorageReport {
    fn push(&mut self, name: impl Into<String>, bytes: u64) {
        self.components.push(StorageComponent {
            name: name.into(),
            bytes,
        });
    }

    fn classifier(&mut self, prefix: &str, c: &Classifier) {
        match c {
            Classifier::Constant(_) => {
                self.push(format!("{prefix}.kind"), 1);
                self.push(format!("{prefix}.bit"), 1);
            }
            Classifier::Linear(h) => {
                let dp = h.reduced_dim() as u64;
                self.push(format!("{prefix}.kind"), 1 + 4);
                self.push(format!("{prefix}.columns"), 4 * dp);
                self.push(format!("{prefix}.weights"), 4 * dp);
                self.push(format!("{prefix}.bias"), 4);
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.components.iter().map(|c| c.bytes).sum()
    }

    pub fn router_bytes(&self) -> u64 {
        self.bytes_where(|name| name == "router")
    }

    /// Total over the column-id tables of every classifier.
    pub fn column_table_bytes(&self) -> u64 {
        self.bytes_where(|name| name.ends_with(".columns"))
    }

    pub fn bytes_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.components
            .iter()
            .filter(|c| pred(&c.name))
            .map(|c| c.bytes)
            .sum()
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn with_capacity(n: usize) -> Self {
        Writer {
            buf: Vec::with_capacity(n),
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn classifier(&mut self, c: &Classifier) {
        match c {
            Classifier::Constant(bit) => {
                self.u8(KIND_CONSTANT);
                self.u8(*bit);
            }
            Classifier::Linear(h) => {
                self.u8(KIND_HYPERPLANE);
                self.u32(h.reduced_dim() as u32);
                h.columns().iter().for_each(|&c| self.u32(c));
                h.weights().iter().for_each(|&v| self.f32(v));
                self.f32(h.bias());
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                field,
                format!(
                    "file truncated at byte {} (needed {len} more bytes)",
                    self.bytes.len()
                ),
            )),
        }
    }
    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
    fn f32(&mut self, field: &str) -> Result<f32> {
        let v = f32::from_le_bytes(self.take(4, field)?.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(field, "non-finite value"));
        }
        Ok(v)
    }
    fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<f32>> {
        let raw = self.take(count.saturating_mul(4), field)?;
        raw.chunks_exact(4)
            .map(|c| {
                let v = f32::from_le_bytes(c.try_into().unwrap());
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::format(field, "non-finite value"))
                }
            })
            .collect()
    }
    fn classifier(&mut self, d: usize, field: &str) -> Result<Classifier> {
        match self.u8(&format!("{field}.kind"))? {
            KIND_CONSTANT => {
                let bit = self.u8(&format!("{field}.bit"))?;
                if bit > 1 {
                    return Err(Error::format(format!("{field}.bit"), format!("{bit} is not a bit")));
                }
                Ok(Classifier::Constant(bit))
            }
            KIND_HYPERPLANE => {
                let dp = self.u32(&format!("{field}.d_prime"))? as usize;
                if dp == 0 || dp > d {
                    return Err(Error::format(format!("{field}.d_prime"), format!("{dp} outside 1..={d}")));
                }
                let raw = self.take(4 * dp, &format!("{field}.columns"))?;
                let columns: Vec<u32> = raw
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                if columns.iter().any(|&c| c as usize >= d) {
                    return Err(Error::format(format!("{field}.columns"), "column id out of range"));
                }
                let weights = self.f32s(dp, &format!("{field}.weights"))?;
                let bias = self.f32(&format!("{field}.bias"))?;
                Hyperplane::new(weights, bias, columns)
                    .map(Classifier::Linear)
                    .map_err(|e| Error::format(field, e.to_string()))
            }
            other => Err(Error::format(format!("{field}.kind"), format!("unknown classifier kind {other}"))),
        }
    }
}
