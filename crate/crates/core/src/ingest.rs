//! Case files, dataset splits and batch streams.
//!
//! The on-disk format is a single JSON document:
//!
//! ```text
//! {"schema": "gridbench/1",
//!  "grid": {"case_id", "base_mva", "buses", "generators", "loads", "shunts", "branches"},
//!  "samples": [{"loads": [{"bus", "p_d", "q_d"}],
//!               "solution": {"v", "theta", "p_g", "q_g"}}]}
//! ```
//!
//! Field names match the serde names of the types in [`crate::grid`].

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::grid::{self, GridCase, Load, OperatingPoint, SolutionLabels};
use crate::rng::{self, Rng};

pub const CASE_SCHEMA: &str = "gridbench/1";

/// Environment variable consulted when a relative data path does not exist.
pub const DATA_DIR_ENV: &str = "GRIDBENCH_DATA_DIR";

fn schema_err(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, at: &str) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| schema_err(format!("{at}/{key}"), "missing required key"))
}

fn typed<T: serde::de::DeserializeOwned>(v: &Value, at: &str) -> Result<T> {
    T::deserialize(v).map_err(|e| schema_err(at, e.to_string()))
}

fn typed_list<T: serde::de::DeserializeOwned>(v: &Value, at: &str) -> Result<Vec<T>> {
    let arr = v
        .as_array()
        .ok_or_else(|| schema_err(at, "expected an array"))?;
    arr.iter()
        .enumerate()
        .map(|(k, x)| typed(x, &format!("{at}/{k}")))
        .collect()
}

fn parse_grid(v: &Value) -> Result<GridCase> {
    let obj = v
        .as_object()
        .ok_or_else(|| schema_err("/grid", "expected an object"))?;
    const KNOWN: [&str; 7] = [
        "case_id",
        "base_mva",
        "buses",
        "generators",
        "loads",
        "shunts",
        "branches",
    ];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(schema_err(format!("/grid/{k}"), "unknown key"));
    }
    let case_id: String = typed(field(obj, "case_id", "/grid")?, "/grid/case_id")?;
    let base_mva = match obj.get("base_mva") {
        None => return Err(Error::Unit("base_mva is missing".into())),
        Some(x) => x
            .as_f64()
            .ok_or_else(|| schema_err("/grid/base_mva", "expected a number"))?,
    };
    if !(base_mva > 0.0) {
        return Err(Error::Unit(format!("base_mva must be positive, got {base_mva}")));
    }
    let case = GridCase {
        case_id,
        base_mva,
        buses: typed_list(field(obj, "buses", "/grid")?, "/grid/buses")?,
        generators: typed_list(field(obj, "generators", "/grid")?, "/grid/generators")?,
        loads: typed_list(field(obj, "loads", "/grid")?, "/grid/loads")?,
        shunts: typed_list(field(obj, "shunts", "/grid")?, "/grid/shunts")?,
        branches: typed_list(field(obj, "branches", "/grid")?, "/grid/branches")?,
    };
    Ok(case)
}

fn parse_sample(case: &GridCase, k: usize, v: &Value) -> Result<OperatingPoint> {
    let at = format!("/samples/{k}");
    let obj = v
        .as_object()
        .ok_or_else(|| schema_err(&at, "expected an object"))?;
    if let Some(key) = obj.keys().find(|x| *x != "loads" && *x != "solution") {
        return Err(schema_err(format!("{at}/{key}"), "unknown key"));
    }
    let loads: Vec<Load> = match obj.get("loads") {
        Some(l) => typed_list(l, &format!("{at}/loads"))?,
        None => Vec::new(),
    };
    for (j, l) in loads.iter().enumerate() {
        if l.bus >= case.bus_count() {
            return Err(schema_err(
                format!("{at}/loads/{j}/bus"),
                format!("sample {k}: load override references missing bus {}", l.bus),
            ));
        }
    }
    let labels: SolutionLabels = typed(field(obj, "solution", &at)?, &format!("{at}/solution"))?;
    let expect = [
        ("v", labels.v.len(), case.bus_count()),
        ("theta", labels.theta.len(), case.bus_count()),
        ("p_g", labels.p_g.len(), case.generators.len()),
        ("q_g", labels.q_g.len(), case.generators.len()),
    ];
    for (name, got, want) in expect {
        if got != want {
            return Err(schema_err(
                format!("{at}/solution/{name}"),
                format!("sample {k}: `{name}` has length {got}, expected {want}"),
            ));
        }
    }
    Ok(OperatingPoint {
        case_id: case.case_id.clone(),
        loads,
        labels,
    })
}

/// Parses a case document. Sample order is preserved.
pub fn parse_case_file(bytes: &[u8]) -> Result<(GridCase, Vec<OperatingPoint>)> {
    let text = std::str::from_utf8(bytes).map_err(|e| schema_err("", format!("not UTF-8: {e}")))?;
    let doc: Value = serde_json::from_str(text).map_err(|e| schema_err("", e.to_string()))?;
    let top = doc
        .as_object()
        .ok_or_else(|| schema_err("", "expected a top-level object"))?;
    if let Some(k) = top
        .keys()
        .find(|k| !["schema", "grid", "samples"].contains(&k.as_str()))
    {
        return Err(schema_err(format!("/{k}"), "unknown key"));
    }
    match field(top, "schema", "")?.as_str() {
        Some(CASE_SCHEMA) => {}
        other => {
            return Err(schema_err(
                "/schema",
                format!("expected \"{CASE_SCHEMA}\", got {other:?}"),
            ))
        }
    }
    let case = parse_grid(field(top, "grid", "")?)?;
    grid::ensure_valid(&case)?;
    let samples = match top.get("samples") {
        None => Vec::new(),
        Some(s) => s
            .as_array()
            .ok_or_else(|| schema_err("/samples", "expected an array"))?
            .iter()
            .enumerate()
            .map(|(k, v)| parse_sample(&case, k, v))
            .collect::<Result<_>>()?,
    };
    Ok((case, samples))
}

pub fn case_document(case: &GridCase, samples: &[OperatingPoint]) -> Value {
    let samples: Vec<Value> = samples
        .iter()
        .map(|op| {
            json!({
                "loads": op.loads,
                "solution": op.labels,
            })
        })
        .collect();
    json!({
        "schema": CASE_SCHEMA,
        "grid": case,
        "samples": samples,
    })
}

pub fn read_case_file(path: &Path) -> Result<(GridCase, Vec<OperatingPoint>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_case_file(&bytes)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_case_file(path: &Path, case: &GridCase, samples: &[OperatingPoint]) -> Result<()> {
    write_json(path, &case_document(case, samples))
}

/// Resolves `p` against `base`, then against `$GRIDBENCH_DATA_DIR`.
pub fn resolve_path(p: &Path, base: Option<&Path>) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    if let Some(b) = base {
        let c = b.join(p);
        if c.exists() {
            return c;
        }
    }
    if p.exists() {
        return p.to_path_buf();
    }
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        let c = PathBuf::from(dir).join(p);
        if c.exists() {
            return c;
        }
    }
    base.map_or_else(|| p.to_path_buf(), |b| b.join(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SplitSpec {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train_idx,
            Split::Val => &self.val_idx,
            Split::Test => &self.test_idx,
        }
    }

    pub fn sample_count(&self) -> usize {
        self.train_idx.len() + self.val_idx.len() + self.test_idx.len()
    }

    /// Checks the three lists are sorted, disjoint and cover `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for split in [Split::Train, Split::Val, Split::Test] {
            let idx = self.indices(split);
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::BadRatios(format!("{} indices are not sorted", split.name())));
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(Error::BadRatios(format!(
                        "index {i} in {} is out of range or repeated",
                        split.name()
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::BadRatios(format!("sample {i} is in no split")));
        }
        Ok(())
    }

    /// Keeps only the first `fraction` of the training indices (at least one).
    pub fn cap_train(&self, fraction: f64) -> SplitSpec {
        let keep = ((self.train_idx.len() as f64 * fraction).floor() as usize)
            .clamp(1, self.train_idx.len().max(1));
        let mut order = self.train_idx.clone();
        Rng::new(self.seed, rng::stream::SPLIT + 1).shuffle(&mut order);
        let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
        kept.sort_unstable();
        SplitSpec {
            train_idx: kept,
            ..self.clone()
        }
    }
}

/// Deterministic split. Sizes are `floor(ratio * n)` for val and test, with
/// the remainder going to train.
pub fn make_splits(sample_count: usize, ratios: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if sample_count < 3 {
        return Err(Error::BadRatios(format!(
            "need at least 3 samples to split, got {sample_count}"
        )));
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::BadRatios(format!("ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(format!("ratios sum to {total}, expected 1")));
    }
    let n = sample_count as f64;
    // The small offset keeps e.g. 0.29 * 100 from flooring to 28.
    let size = |r: f64| ((r * n) + 1e-9).floor() as usize;
    let (n_val, n_test) = (size(ratios[1]), size(ratios[2]));
    let n_train = sample_count - n_val - n_test;

    let perm = Rng::new(seed, rng::stream::SPLIT).permutation(sample_count);
    let mut train_idx = perm[..n_train].to_vec();
    let mut val_idx = perm[n_train..n_train + n_val].to_vec();
    let mut test_idx = perm[n_train + n_val..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitSpec {
        seed,
        ratios,
        train_idx,
        val_idx,
        test_idx,
    })
}

/// On-disk manifest: one topology, its sample files and the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub case_id: String,
    pub sample_paths: Vec<PathBuf>,
    pub split: SplitSpec,
}

/// A loaded topology with all of its samples and their split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub case: GridCase,
    pub samples: Vec<OperatingPoint>,
    pub split: SplitSpec,
}

impl Dataset {
    pub fn new(case: GridCase, samples: Vec<OperatingPoint>, split: SplitSpec) -> Result<Self> {
        split.check_partition(samples.len())?;
        if let Some(op) = samples.iter().find(|o| o.case_id != case.case_id) {
            return Err(Error::MismatchedCase {
                expected: case.case_id.clone(),
                found: op.case_id.clone(),
            });
        }
        Ok(Self {
            case,
            samples,
            split,
        })
    }

    /// Splits `samples` with [`make_splits`].
    pub fn with_ratios(
        case: GridCase,
        samples: Vec<OperatingPoint>,
        ratios: [f64; 3],
        seed: u64,
    ) -> Result<Self> {
        let split = make_splits(samples.len(), ratios, seed)?;
        Self::new(case, samples, split)
    }

    pub fn case_id(&self) -> &str {
        &self.case.case_id
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.split.indices(split).len()
    }

    pub fn split_samples(&self, split: Split) -> Vec<OperatingPoint> {
        self.split
            .indices(split)
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect()
    }

    /// Loads a manifest. Sample files are concatenated in manifest order.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let bytes = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| schema_err("", e.to_string()))?;
        let base = manifest_path.parent();
        let unique: BTreeSet<&PathBuf> = manifest.sample_paths.iter().collect();
        if unique.len() != manifest.sample_paths.len() {
            return Err(schema_err("/sample_paths", "paths must be unique"));
        }
        if manifest.sample_paths.is_empty() {
            return Err(Error::DataMissing(format!("manifest for `{}` lists no files", manifest.case_id)));
        }
        let mut case: Option<GridCase> = None;
        let mut samples = Vec::new();
        for p in &manifest.sample_paths {
            let path = resolve_path(p, base);
            if !path.exists() {
                return Err(Error::DataMissing(path.display().to_string()));
            }
            let (c, s) = read_case_file(&path)?;
            if c.case_id != manifest.case_id {
                return Err(Error::MismatchedCase {
                    expected: manifest.case_id.clone(),
                    found: c.case_id,
                });
            }
            match &case {
                Some(prev) if *prev != c => {
                    return Err(Error::InvalidCase(format!(
                        "{} describes a different grid than earlier files",
                        path.display()
                    )))
                }
                Some(_) => {}
                None => case = Some(c),
            }
            samples.extend(s);
        }
        Self::new(case.expect("at least one file"), samples, manifest.split)
    }
}

/// Order of one epoch over `split`: reshuffled per `(seed, epoch)` for train,
/// index order for val and test.
pub fn epoch_order(spec: &SplitSpec, split: Split, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx = spec.indices(split).to_vec();
    if split == Split::Train {
        Rng::new(seed, rng::stream::EPOCH_BASE + epoch).shuffle(&mut idx);
    }
    idx
}

#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub case: &'a GridCase,
    pub indices: Vec<usize>,
    pub samples: Vec<&'a OperatingPoint>,
    /// Cumulative count including this batch.
    pub samples_seen: u64,
}

/// One epoch of batches. `samples_seen` starts at `epoch * |split|`.
pub struct BatchStream<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    samples_seen: u64,
}

impl<'a> Iterator for BatchStream<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        self.samples_seen += indices.len() as u64;
        Some(Batch {
            case: &self.dataset.case,
            samples: indices.iter().map(|&i| &self.dataset.samples[i]).collect(),
            indices,
            samples_seen: self.samples_seen,
        })
    }
}

pub fn batch_stream(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<BatchStream<'_>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let order = epoch_order(&dataset.split, split, seed, epoch);
    if order.is_empty() {
        return Err(Error::EmptySplit(format!("{}:{}", dataset.case_id(), split.name())));
    }
    Ok(BatchStream {
        dataset,
        samples_seen: epoch * order.len() as u64,
        order,
        pos: 0,
        batch_size,
    })
}

/// Endless train batches across epochs, as index lists.
#[derive(Debug, Clone)]
pub struct EpochCursor {
    spec_train: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
    pub samples_seen: u64,
}

impl EpochCursor {
    pub fn new(spec: &SplitSpec, seed: u64) -> Result<Self> {
        if spec.train_idx.is_empty() {
            return Err(Error::EmptySplit("train".into()));
        }
        Ok(Self {
            spec_train: spec.train_idx.clone(),
            order: epoch_order(spec, Split::Train, seed, 0),
            pos: 0,
            epoch: 0,
            seed,
            samples_seen: 0,
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next batch; a batch never straddles an epoch boundary.
    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            let mut idx = self.spec_train.clone();
            Rng::new(self.seed, rng::stream::EPOCH_BASE + self.epoch).shuffle(&mut idx);
            self.order = idx;
        }
        let end = (self.pos + batch_size.max(1)).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        self.samples_seen += out.len() as u64;
        out
    }
}
