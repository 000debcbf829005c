//! Embedding datasets: manifest/vector/softmax file formats, invariant checks
//! and retrieval-pool construction.
//!
//! On disk a dataset named `NAME` is two files side by side:
//!
//! * `NAME.manifest.csv`: optional `#key=value` metadata lines (`#dim=` is
//!   required, `#labels=` optionally declares the label set as a
//!   `;`-separated list), then a CSV table with header
//!   `image_id,lesion_id,label,split,has_pathology`.
//! * `NAME.vectors.f32`: row-major little-endian `f32`, `dim` values per
//!   record, in manifest row order.
//!
//! A softmax table `NAME.softmax.csv` has header `image_id,<class>,...` and one
//! probability row per image.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};

pub const MANIFEST_SUFFIX: &str = ".manifest.csv";
pub const VECTORS_SUFFIX: &str = ".vectors.f32";
pub const SOFTMAX_SUFFIX: &str = ".softmax.csv";

/// Tolerance on softmax row sums.
pub const SOFTMAX_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::UnknownSplit(other.to_string())),
        }
    }
}

/// One image: identifiers, diagnosis, split and its feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub lesion_id: String,
    pub label: String,
    pub split: Split,
    pub has_pathology: bool,
    pub vector: Vec<f32>,
}

/// A validated, immutable collection of embedding records.
///
/// Construction checks every invariant and rejects the first violation:
/// vector length equals `dimensionality`, elements are finite with nonzero
/// norm, image ids are unique, labels belong to the label set, records
/// without a pathology diagnosis live only in the train split, and no lesion
/// spans two splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    dimensionality: usize,
    label_set: Vec<String>,
    records: Vec<EmbeddingRecord>,
    metadata: BTreeMap<String, String>,
    by_id: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset whose label set is the sorted set of labels present.
    pub fn new(
        name: impl Into<String>,
        dimensionality: usize,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self> {
        let labels: BTreeSet<String> = records.iter().map(|r| r.label.clone()).collect();
        Self::with_label_set(name, dimensionality, labels.into_iter().collect(), records)
    }

    /// Builds a dataset with an explicitly declared label set, which may
    /// contain classes that no record carries.
    pub fn with_label_set(
        name: impl Into<String>,
        dimensionality: usize,
        label_set: Vec<String>,
        records: Vec<EmbeddingRecord>,
    ) -> Result<Self> {
        if dimensionality == 0 {
            return Err(Error::Config("dimensionality must be at least 1".into()));
        }
        let label_set: Vec<String> = label_set
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let known: BTreeSet<&str> = label_set.iter().map(String::as_str).collect();

        let mut by_id = HashMap::with_capacity(records.len());
        let mut lesion_split: HashMap<&str, Split> = HashMap::new();
        for (pos, rec) in records.iter().enumerate() {
            if rec.vector.len() != dimensionality {
                return Err(Error::DimensionalityMismatch {
                    context: format!("image {:?}", rec.image_id),
                    expected: dimensionality,
                    found: rec.vector.len(),
                });
            }
            if let Some(position) = rec.vector.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    image_id: rec.image_id.clone(),
                    position,
                });
            }
            if rec.vector.iter().all(|&x| x == 0.0) {
                return Err(Error::ZeroNorm(rec.image_id.clone()));
            }
            if by_id.insert(rec.image_id.clone(), pos).is_some() {
                return Err(Error::DuplicateImageId(rec.image_id.clone()));
            }
            if !known.contains(rec.label.as_str()) {
                return Err(Error::UnknownLabel {
                    image_id: rec.image_id.clone(),
                    label: rec.label.clone(),
                });
            }
            if !rec.has_pathology && rec.split != Split::Train {
                return Err(Error::UnverifiedOutsideTrain(rec.image_id.clone()));
            }
            match lesion_split.get(rec.lesion_id.as_str()) {
                Some(&split) if split != rec.split => {
                    return Err(Error::LesionLeakage {
                        lesion_id: rec.lesion_id.clone(),
                        first: split.as_str(),
                        second: rec.split.as_str(),
                    });
                }
                Some(_) => {}
                None => {
                    lesion_split.insert(&rec.lesion_id, rec.split);
                }
            }
        }

        Ok(Dataset {
            name: name.into(),
            dimensionality,
            label_set,
            records,
            metadata: BTreeMap::new(),
            by_id,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dimensionality(&self) -> usize {
        self.dimensionality
    }

    /// Sorted class names.
    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&EmbeddingRecord> {
        self.by_id.get(image_id).map(|&i| &self.records[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Free-form `#key=value` metadata carried by the manifest (besides
    /// `dim` and `labels`, which are structural).
    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }
}

/// The candidate set for retrieval: the train-split records of a dataset, in
/// manifest order.
#[derive(Debug, Clone)]
pub struct RetrievalPool<'a> {
    dataset: &'a Dataset,
    positions: Vec<usize>,
}

impl<'a> RetrievalPool<'a> {
    pub fn dataset(&self) -> &'a Dataset {
        self.dataset
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Positions of the pool members within the dataset's record list.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn records(&self) -> impl Iterator<Item = &'a EmbeddingRecord> + '_ {
        self.positions.iter().map(|&i| &self.dataset.records[i])
    }
}

pub fn build_retrieval_pool(ds: &Dataset) -> Result<RetrievalPool<'_>> {
    let positions: Vec<usize> = ds
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return Err(Error::EmptyPool);
    }
    Ok(RetrievalPool {
        dataset: ds,
        positions,
    })
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    image_id: String,
    lesion_id: String,
    label: String,
    split: String,
    has_pathology: String,
}

fn parse_bool(token: &str) -> Option<bool> {
    match token.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// `dir/NAME.manifest.csv` → `dir/NAME` (the common stem of the sibling files).
pub fn dataset_stem(manifest: &Path) -> Result<(PathBuf, String)> {
    let file = manifest
        .file_name()
        .and_then(|f| f.to_str())
        .ok_or_else(|| Error::parse(manifest, "not a file path"))?;
    let name = file.strip_suffix(MANIFEST_SUFFIX).ok_or_else(|| {
        Error::parse(
            manifest,
            format!("manifest file name must end in {MANIFEST_SUFFIX}"),
        )
    })?;
    Ok((manifest.with_file_name(name), name.to_string()))
}

fn sibling(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn vectors_path(manifest: &Path) -> Result<PathBuf> {
    let (stem, _) = dataset_stem(manifest)?;
    Ok(sibling(&stem, VECTORS_SUFFIX))
}

/// Conventional location of the softmax table next to a manifest.
pub fn softmax_path(manifest: &Path) -> Result<PathBuf> {
    let (stem, _) = dataset_stem(manifest)?;
    Ok(sibling(&stem, SOFTMAX_SUFFIX))
}

pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let (stem, name) = dataset_stem(path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    let mut metadata = BTreeMap::new();
    let mut body_start = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if let Some(meta) = trimmed.strip_prefix('#') {
            let (key, value) = meta
                .split_once('=')
                .ok_or_else(|| Error::parse(path, format!("bad metadata line {trimmed:?}")))?;
            metadata.insert(key.trim().to_string(), value.trim().to_string());
            body_start += line.len();
        } else if trimmed.is_empty() {
            body_start += line.len();
        } else {
            break;
        }
    }

    let dimensionality: usize = metadata
        .remove("dim")
        .ok_or_else(|| Error::parse(path, "missing #dim= metadata line"))?
        .parse()
        .map_err(|_| Error::parse(path, "#dim= is not a positive integer"))?;
    let declared_labels = metadata.remove("labels").map(|s| {
        s.split(';')
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect::<Vec<_>>()
    });

    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text[body_start..].as_bytes());
    let mut rows = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::parse(path, format!("row {}: {e}", line + 1)))?;
        rows.push(row);
    }

    let vpath = sibling(&stem, VECTORS_SUFFIX);
    let bytes = fs::read(&vpath).map_err(|e| Error::io(&vpath, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(&vpath, "file length is not a multiple of 4 bytes"));
    }
    let floats = bytes.len() / 4;
    if floats != rows.len() * dimensionality {
        return Err(Error::DimensionalityMismatch {
            context: format!("{} ({} records)", vpath.display(), rows.len()),
            expected: rows.len() * dimensionality,
            found: floats,
        });
    }

    let mut records = Vec::with_capacity(rows.len());
    for (row, chunk) in rows
        .into_iter()
        .zip(bytes.chunks_exact(4 * dimensionality.max(1)))
    {
        let split: Split = row.split.parse()?;
        let has_pathology = parse_bool(&row.has_pathology)
            .ok_or_else(|| Error::parse(path, format!("bad has_pathology {:?}", row.has_pathology)))?;
        let vector = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        records.push(EmbeddingRecord {
            image_id: row.image_id,
            lesion_id: row.lesion_id,
            label: row.label,
            split,
            has_pathology,
            vector,
        });
    }

    let mut ds = match declared_labels {
        Some(labels) => Dataset::with_label_set(name, dimensionality, labels, records)?,
        None => Dataset::new(name, dimensionality, records)?,
    };
    ds.metadata = metadata;
    Ok(ds)
}

/// Writes `dir/NAME.manifest.csv` and `dir/NAME.vectors.f32`; returns the
/// manifest path.
pub fn write_manifest(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = dir.join(&ds.name);
    let mpath = sibling(&stem, MANIFEST_SUFFIX);
    let vpath = sibling(&stem, VECTORS_SUFFIX);

    let mut out = format!("#dim={}\n#labels={}\n", ds.dimensionality, ds.label_set.join(";"));
    for (k, v) in &ds.metadata {
        out.push_str(&format!("#{k}={v}\n"));
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["image_id", "lesion_id", "label", "split", "has_pathology"])
        .and_then(|_| {
            ds.records.iter().try_for_each(|r| {
                writer.write_record([
                    r.image_id.as_str(),
                    r.lesion_id.as_str(),
                    r.label.as_str(),
                    r.split.as_str(),
                    if r.has_pathology { "true" } else { "false" },
                ])
            })
        })
        .map_err(|e| Error::parse(&mpath, e.to_string()))?;
    let table = writer
        .into_inner()
        .map_err(|e| Error::parse(&mpath, e.to_string()))?;
    out.push_str(&String::from_utf8_lossy(&table));
    fs::write(&mpath, out).map_err(|e| Error::io(&mpath, e))?;

    let mut bytes = Vec::with_capacity(ds.records.len() * ds.dimensionality * 4);
    for r in &ds.records {
        for x in &r.vector {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(&vpath, bytes).map_err(|e| Error::io(&vpath, e))?;
    Ok(mpath)
}

/// Per-image class probabilities from a classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxTable {
    classes: Vec<String>,
    rows: BTreeMap<String, Vec<f64>>,
}

impl SoftmaxTable {
    pub fn new(classes: Vec<String>, rows: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let unique: BTreeSet<&String> = classes.iter().collect();
        if classes.is_empty() || unique.len() != classes.len() {
            return Err(Error::Config(
                "softmax class list must be non-empty and free of duplicates".into(),
            ));
        }
        for (id, row) in &rows {
            if row.len() != classes.len() {
                return Err(Error::DimensionalityMismatch {
                    context: format!("softmax row {id:?}"),
                    expected: classes.len(),
                    found: row.len(),
                });
            }
            if let Some(&value) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::ProbabilityOutOfRange {
                    image_id: id.clone(),
                    value,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SOFTMAX_SUM_TOLERANCE {
                return Err(Error::NotNormalized {
                    image_id: id.clone(),
                    sum,
                });
            }
        }
        Ok(SoftmaxTable { classes, rows })
    }

    /// Class names in column order.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn row(&self, image_id: &str) -> Option<&[f64]> {
        self.rows.get(image_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.rows.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Fails with the first test-split image of `ds` lacking a row.
    pub fn check_covers_test_split(&self, ds: &Dataset) -> Result<()> {
        match ds
            .split(Split::Test)
            .find(|r| !self.rows.contains_key(&r.image_id))
        {
            Some(r) => Err(Error::MissingPrediction(r.image_id.clone())),
            None => Ok(()),
        }
    }
}

/// Reads a softmax table and checks it covers every test image of `ds`.
pub fn load_softmax(path: &Path, ds: &Dataset) -> Result<SoftmaxTable> {
    let table = read_softmax(path)?;
    table.check_covers_test_split(ds)?;
    Ok(table)
}

/// Reads a softmax table without reference to a dataset.
pub fn read_softmax(path: &Path) -> Result<SoftmaxTable> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    if headers.get(0) != Some("image_id") || headers.len() < 2 {
        return Err(Error::parse(
            path,
            "header must be image_id followed by class columns",
        ));
    }
    let classes: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut rows = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, format!("row {}: {e}", line + 1)))?;
        let id = rec[0].to_string();
        let probs = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, format!("row {}: {e}", line + 1)))?;
        if rows.insert(id.clone(), probs).is_some() {
            return Err(Error::DuplicateImageId(id));
        }
    }
    SoftmaxTable::new(classes, rows)
}

pub fn write_softmax(table: &SoftmaxTable, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let header = std::iter::once("image_id").chain(table.classes.iter().map(String::as_str));
        w.write_record(header)
            .map_err(|e| Error::parse(path, e.to_string()))?;
        for (id, row) in &table.rows {
            let fields = std::iter::once(id.clone()).chain(row.iter().map(|p| p.to_string()));
            w.write_record(fields)
                .map_err(|e| Error::parse(path, e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Assigns splits to synthetic records, stratified by label.
///
/// Lesions are the unit of assignment, so a lesion's images always land in
/// the same split. Within each label the lesions are shuffled with a seeded
/// RNG; the first `round(test_fraction · n)` become test, the next
/// `round(valid_fraction · n)` valid, the rest train. Records without a
/// pathology diagnosis are forced into train.
pub fn stratified_split(
    records: &mut [EmbeddingRecord],
    valid_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&valid_fraction)
        || !(0.0..=1.0).contains(&test_fraction)
        || valid_fraction + test_fraction > 1.0
    {
        return Err(Error::Config(format!(
            "split fractions valid={valid_fraction} test={test_fraction} must lie in [0,1] and sum to at most 1"
        )));
    }
    // label -> lesions (first-seen order), lesion -> whether all images are verified
    let mut lesions_by_label: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut verified: HashMap<&str, bool> = HashMap::new();
    for r in records.iter() {
        let entry = verified.entry(&r.lesion_id).or_insert_with(|| {
            lesions_by_label.entry(&r.label).or_default().push(&r.lesion_id);
            true
        });
        *entry &= r.has_pathology;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment: HashMap<String, Split> = HashMap::new();
    for lesions in lesions_by_label.values() {
        let mut eligible: Vec<&str> = lesions.iter().copied().filter(|l| verified[l]).collect();
        eligible.shuffle(&mut rng);
        let n = eligible.len() as f64;
        let n_test = (test_fraction * n).round() as usize;
        let n_valid = ((valid_fraction * n).round() as usize).min(eligible.len() - n_test);
        for (i, lesion) in eligible.iter().enumerate() {
            let split = if i < n_test {
                Split::Test
            } else if i < n_test + n_valid {
                Split::Valid
            } else {
                Split::Train
            };
            assignment.insert(lesion.to_string(), split);
        }
    }
    for r in records.iter_mut() {
        r.split = assignment.get(&r.lesion_id).copied().unwrap_or(Split::Train);
    }
    Ok(())
}
