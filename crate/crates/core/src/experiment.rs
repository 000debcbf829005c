//! Intra-source and cross-source evaluation grids, the similarity report,
//! and report files.
//!
//! Embeddings are keyed by `(network, dataset)`: the network that extracted
//! the features and the dataset the images come from. An intra run for
//! dataset `D` uses the `(D, D)` embedding both as pool (train split) and as
//! queries (test split). A cross cell `(train T, test S, cbir C, k)` queries
//! the test split of `(T, S)` against the train split of `(T, C)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{self, ClassDistribution, MalignantSet};
use crate::dataset::{self, Dataset, EmbeddingRecord, SoftmaxTable, Split};
use crate::error::{Error, Result};
use crate::index::{NormalizedIndex, Query, RetrievalResult};
use crate::metrics::{self, RocPoint};
use crate::stats::{
    self, AucComparison, BootstrapConfig, ConfidenceInterval, NormalityDecision, PairedTestResult,
};

pub const DEFAULT_K_LIST: [usize; 5] = [2, 4, 8, 16, 32];
/// Largest `k` of the accuracy-versus-k sweep.
pub const SWEEP_MAX_K: usize = 32;

/// Cutoffs on the malignancy score for the reported operating points.
pub const CUTOFFS: [f64; 2] = [0.25, 0.5];

fn default_replicates() -> usize {
    stats::DEFAULT_REPLICATES
}

fn default_k_list() -> Vec<usize> {
    DEFAULT_K_LIST.to_vec()
}

fn default_alpha() -> f64 {
    stats::ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Malignant labels; defaults to the standard malignant diagnoses present
    /// in the label set.
    #[serde(default)]
    pub malignant: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub network: String,
    pub dataset: String,
    pub manifest: PathBuf,
    #[serde(default)]
    pub softmax: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossConfig {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub cbir: Vec<String>,
}

/// Declarative experiment description, usually read from TOML:
///
/// ```toml
/// seed = 42
/// k_list = [2, 4, 8, 16, 32]
/// intra = ["edra"]
///
/// [[dataset]]
/// name = "edra"
/// malignant = ["mel"]
///
/// [[embedding]]
/// network = "edra"
/// dataset = "edra"
/// manifest = "emb/edra.manifest.csv"
/// softmax = "emb/edra.softmax.csv"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    /// Also compute accuracy for every k in 1..=32.
    #[serde(default)]
    pub k_sweep: bool,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default, rename = "dataset")]
    pub datasets: Vec<DatasetConfig>,
    #[serde(default, rename = "embedding")]
    pub embeddings: Vec<EmbeddingConfig>,
    #[serde(default)]
    pub intra: Vec<String>,
    #[serde(default)]
    pub cross: Option<CrossConfig>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative embedding paths are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut cfg.embeddings {
            e.manifest = base.join(&e.manifest);
            if let Some(s) = &mut e.softmax {
                *s = base.join(&*s);
            }
        }
        Ok(cfg)
    }

    pub fn settings(&self) -> RunSettings {
        RunSettings {
            seed: self.seed,
            replicates: self.replicates,
            k_list: self.k_list.clone(),
            k_sweep: self.k_sweep,
            alpha: self.alpha,
        }
    }

    fn check_scalars(&self) -> Result<()> {
        self.settings().validate()?;
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.datasets {
            if !seen.insert(d.name.as_str()) {
                return Err(Error::Config(format!("dataset {:?} declared twice", d.name)));
            }
        }
        let mut pairs = std::collections::BTreeSet::new();
        for e in &self.embeddings {
            if !pairs.insert((e.network.as_str(), e.dataset.as_str())) {
                return Err(Error::Config(format!(
                    "embedding ({}, {}) declared twice",
                    e.network, e.dataset
                )));
            }
        }
        if self.intra.is_empty() && self.cross.is_none() {
            return Err(Error::Config(
                "nothing to run: set `intra` and/or `[cross]`".into(),
            ));
        }
        if let Some(c) = &self.cross {
            if c.train.is_empty() || c.test.is_empty() || c.cbir.is_empty() {
                return Err(Error::Config(
                    "cross train/test/cbir lists must be non-empty".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Knobs shared by every run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSettings {
    pub seed: u64,
    pub replicates: usize,
    pub k_list: Vec<usize>,
    pub k_sweep: bool,
    pub alpha: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            replicates: stats::DEFAULT_REPLICATES,
            k_list: DEFAULT_K_LIST.to_vec(),
            k_sweep: false,
            alpha: stats::ALPHA,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.k_list.is_empty() {
            return Err(Error::Config("k_list must not be empty".into()));
        }
        if self.k_list[0] == 0 {
            return Err(Error::ZeroK);
        }
        if self.k_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "k_list must be strictly ascending, got {:?}",
                self.k_list
            )));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Deepest retrieval any run needs.
    pub fn max_k(&self) -> usize {
        let listed = self.k_list.last().copied().unwrap_or(1);
        if self.k_sweep {
            listed.max(SWEEP_MAX_K)
        } else {
            listed
        }
    }

    fn bootstrap(&self, key: &str) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.replicates,
            seed: cell_seed(self.seed, key),
            level: 0.95,
        }
    }
}

/// Per-job seed: the master seed mixed with a 64-bit FNV-1a hash of the job
/// key, so every job draws the same numbers however jobs are scheduled.
pub fn cell_seed(master: u64, key: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in key.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    master ^ h
}

/// Embedding of one dataset by one network, with that network's softmax
/// output when available.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub network: String,
    pub dataset: String,
    pub data: Dataset,
    pub softmax: Option<SoftmaxTable>,
}

/// Loaded and fully validated experiment, ready to run.
#[derive(Debug)]
pub struct Experiment {
    settings: RunSettings,
    intra: Vec<String>,
    cross: Option<CrossConfig>,
    embeddings: BTreeMap<(String, String), Embedding>,
    malignant: BTreeMap<String, MalignantSet>,
}

impl Experiment {
    /// Loads every referenced file and validates the whole grid before any
    /// evaluation starts.
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        config.check_scalars()?;
        let mut embeddings = Vec::with_capacity(config.embeddings.len());
        for e in &config.embeddings {
            let data = dataset::load_manifest(&e.manifest)?;
            let softmax = match &e.softmax {
                Some(path) => Some(dataset::read_softmax(path)?),
                None => None,
            };
            embeddings.push(Embedding {
                network: e.network.clone(),
                dataset: e.dataset.clone(),
                data,
                softmax,
            });
        }
        Self::from_parts(config, embeddings)
    }

    /// Builds an experiment from in-memory embeddings; the `embedding`
    /// entries of `config` are ignored.
    pub fn from_parts(config: &ExperimentConfig, embeddings: Vec<Embedding>) -> Result<Self> {
        config.check_scalars()?;
        let settings = config.settings();
        let mut map = BTreeMap::new();
        for e in embeddings {
            let key = (e.network.clone(), e.dataset.clone());
            if map.insert(key, e).is_some() {
                return Err(Error::Config("duplicate (network, dataset) embedding".into()));
            }
        }

        let declared: BTreeMap<&str, &DatasetConfig> =
            config.datasets.iter().map(|d| (d.name.as_str(), d)).collect();
        for name in declared.keys() {
            if !map.keys().any(|(_, d)| d == name) {
                return Err(Error::Config(format!("dataset {name:?} has no embedding")));
            }
        }
        let mut malignant: BTreeMap<String, MalignantSet> = BTreeMap::new();
        for ((network, name), e) in &map {
            let set = match declared.get(name.as_str()).and_then(|d| d.malignant.as_ref()) {
                Some(classes) => MalignantSet::new(classes.iter(), e.data.label_set()),
                None => MalignantSet::default_for(e.data.label_set()),
            }
            .map_err(|err| Error::Config(format!("malignant set for ({network}, {name}): {err}")))?;
            malignant.entry(name.clone()).or_insert(set);
        }

        let exp = Experiment {
            settings,
            intra: config.intra.clone(),
            cross: config.cross.clone(),
            embeddings: map,
            malignant,
        };
        exp.check_grid()?;
        Ok(exp)
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    fn embedding(&self, network: &str, dataset: &str) -> Result<&Embedding> {
        self.embeddings
            .get(&(network.to_string(), dataset.to_string()))
            .ok_or_else(|| {
                Error::Config(format!(
                    "no embedding for network {network:?} on dataset {dataset:?}"
                ))
            })
    }

    fn softmax_of<'a>(&self, e: &'a Embedding) -> Result<&'a SoftmaxTable> {
        e.softmax.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "missing softmax table for network {:?} on dataset {:?}",
                e.network, e.dataset
            ))
        })
    }

    fn check_pool(&self, e: &Embedding, need: usize) -> Result<()> {
        let pool = e.data.split(Split::Train).count();
        if pool == 0 {
            return Err(Error::EmptyPool);
        }
        if need > pool {
            return Err(Error::KExceedsPool { k: need, pool });
        }
        Ok(())
    }

    fn check_queries(&self, e: &Embedding) -> Result<()> {
        if e.data.split(Split::Test).next().is_none() {
            return Err(Error::Config(format!(
                "dataset {:?} (network {:?}) has no test images",
                e.dataset, e.network
            )));
        }
        let sm = self.softmax_of(e)?;
        sm.check_covers_test_split(&e.data)
    }

    fn check_grid(&self) -> Result<()> {
        let max_k = self.settings.max_k();
        for d in &self.intra {
            let e = self.embedding(d, d)?;
            self.check_queries(e)?;
            self.check_pool(e, max_k)?;
        }
        if let Some(c) = &self.cross {
            for t in &c.train {
                for s in &c.test {
                    let q = self.embedding(t, s)?;
                    self.check_queries(q)?;
                    for cb in &c.cbir {
                        let p = self.embedding(t, cb)?;
                        self.check_pool(p, self.settings.k_list.last().copied().unwrap_or(1))?;
                        if p.data.dimensionality() != q.data.dimensionality() {
                            return Err(Error::DimensionalityMismatch {
                                context: format!("network {t:?}: datasets {s:?} and {cb:?}"),
                                expected: q.data.dimensionality(),
                                found: p.data.dimensionality(),
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Table 2 style evaluation of every intra dataset.
    pub fn run_intra(&self) -> Result<Vec<IntraReport>> {
        self.intra
            .par_iter()
            .map(|d| {
                let e = self.embedding(d, d)?;
                evaluate_intra(
                    d,
                    &e.data,
                    self.softmax_of(e)?,
                    &self.malignant[d],
                    &self.settings,
                )
            })
            .collect()
    }

    /// Table 3 style mAP grid.
    pub fn run_cross(&self) -> Result<Option<CrossReport>> {
        let Some(c) = &self.cross else {
            return Ok(None);
        };
        let pairs: Vec<(&String, &String)> = c
            .train
            .iter()
            .flat_map(|t| c.test.iter().map(move |s| (t, s)))
            .collect();
        let softmax = pairs
            .par_iter()
            .map(|&(t, s)| {
                let q = self.embedding(t, s)?;
                let queries: Vec<&EmbeddingRecord> = q.data.split(Split::Test).collect();
                let truth: Vec<&str> = queries.iter().map(|r| r.label.as_str()).collect();
                let dists = softmax_dists(&queries, self.softmax_of(q)?)?;
                let map = metrics::mean_average_precision(&dists, &truth, q.data.label_set())?;
                Ok(CrossSoftmax {
                    train: t.clone(),
                    test: s.clone(),
                    map: map.map,
                    skipped: map.skipped,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let triples: Vec<(&String, &String, &String)> = pairs
            .iter()
            .flat_map(|&(t, s)| c.cbir.iter().map(move |cb| (t, s, cb)))
            .collect();
        let cells = triples
            .par_iter()
            .map(|&(t, s, cb)| self.cross_cells(t, s, cb))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect::<Vec<_>>();

        let expected = c.train.len() * c.test.len() * c.cbir.len() * self.settings.k_list.len();
        if cells.len() != expected {
            return Err(Error::Audit(format!(
                "cross grid produced {} cells, expected {expected}",
                cells.len()
            )));
        }
        Ok(Some(CrossReport { cells, softmax }))
    }

    fn cross_cells(&self, t: &str, s: &str, cb: &str) -> Result<Vec<CrossCell>> {
        let q = self.embedding(t, s)?;
        let p = self.embedding(t, cb)?;
        let pool = dataset::build_retrieval_pool(&p.data)?;
        let index = NormalizedIndex::build(&pool)?;
        let queries: Vec<&EmbeddingRecord> = q.data.split(Split::Test).collect();
        let truth: Vec<&str> = queries.iter().map(|r| r.label.as_str()).collect();
        let k_max = self.settings.k_list.last().copied().unwrap_or(1);
        let results = retrieve(&index, &queries, k_max)?;
        self.settings
            .k_list
            .iter()
            .map(|&k| {
                let dists = results
                    .iter()
                    .map(|r| classify::cbir_distribution(&prefix(r, k), &index))
                    .collect::<Result<Vec<_>>>()?;
                let map = metrics::mean_average_precision(&dists, &truth, q.data.label_set())?;
                Ok(CrossCell {
                    train: t.to_string(),
                    test: s.to_string(),
                    cbir: cb.to_string(),
                    k,
                    map: map.map,
                    skipped: map.skipped,
                })
            })
            .collect()
    }

    /// Same-label versus different-label similarity for every intra dataset.
    pub fn similarity_report(&self) -> Result<Vec<SimilarityReport>> {
        self.intra
            .par_iter()
            .map(|d| {
                let e = self.embedding(d, d)?;
                similarity_report(d, &e.data, &e.data, self.settings.alpha)
            })
            .collect()
    }

    pub fn run(&self) -> Result<ExperimentGrid> {
        Ok(ExperimentGrid {
            settings: self.settings.clone(),
            intra: self.run_intra()?,
            cross: self.run_cross()?,
            similarity: self.similarity_report()?,
        })
    }
}

fn retrieve(index: &NormalizedIndex, queries: &[&EmbeddingRecord], k: usize) -> Result<Vec<RetrievalResult>> {
    let q: Vec<Query<'_>> = queries
        .iter()
        .map(|r| Query {
            id: &r.image_id,
            vector: &r.vector,
        })
        .collect();
    index.batch_top_k(&q, k)
}

/// First `k` neighbors of a deeper retrieval (results are prefix-stable).
pub fn prefix(r: &RetrievalResult, k: usize) -> RetrievalResult {
    RetrievalResult {
        query_id: r.query_id.clone(),
        neighbors: r.neighbors[..k.min(r.neighbors.len())].to_vec(),
    }
}

fn softmax_dists(queries: &[&EmbeddingRecord], sm: &SoftmaxTable) -> Result<Vec<ClassDistribution>> {
    queries
        .iter()
        .map(|r| {
            let row = sm
                .row(&r.image_id)
                .ok_or_else(|| Error::MissingPrediction(r.image_id.clone()))?;
            classify::softmax_distribution(row, sm.classes())
        })
        .collect()
}

/// Table 2 columns for one method. Sensitivity and specificity are percent;
/// they and the AUC are absent when the test truth holds a single class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRecord {
    pub accuracy: f64,
    pub sens_25: Option<f64>,
    pub spec_25: Option<f64>,
    pub sens_50: Option<f64>,
    pub spec_50: Option<f64>,
    pub auc: Option<ConfidenceInterval>,
    pub map: f64,
    pub map_skipped: Vec<String>,
}

/// Per-image outputs of one method, the raw material of a [`MetricRecord`].
#[derive(Debug, Clone)]
pub struct MethodOutput {
    pub top1: Vec<String>,
    pub malignancy: Vec<f64>,
    pub dists: Vec<ClassDistribution>,
}

impl MethodOutput {
    pub fn cbir(
        results: &[RetrievalResult],
        index: &NormalizedIndex,
        malignant: &MalignantSet,
    ) -> Result<Self> {
        let mut out = MethodOutput {
            top1: Vec::with_capacity(results.len()),
            malignancy: Vec::with_capacity(results.len()),
            dists: Vec::with_capacity(results.len()),
        };
        for r in results {
            out.top1.push(classify::cbir_top1(r, index)?);
            out.malignancy
                .push(classify::cbir_malignancy(r, index, malignant)?);
            out.dists.push(classify::cbir_distribution(r, index)?);
        }
        Ok(out)
    }

    pub fn softmax(
        queries: &[&EmbeddingRecord],
        sm: &SoftmaxTable,
        malignant: &MalignantSet,
    ) -> Result<Self> {
        let mut out = MethodOutput {
            top1: Vec::with_capacity(queries.len()),
            malignancy: Vec::with_capacity(queries.len()),
            dists: Vec::with_capacity(queries.len()),
        };
        for r in queries {
            let row = sm
                .row(&r.image_id)
                .ok_or_else(|| Error::MissingPrediction(r.image_id.clone()))?;
            out.top1
                .push(classify::softmax_top1(row, sm.classes())?.to_string());
            out.malignancy
                .push(classify::softmax_malignancy(row, sm.classes(), malignant)?);
            out.dists.push(classify::softmax_distribution(row, sm.classes())?);
        }
        Ok(out)
    }
}

/// Scores one method against the truth. The AUC interval is a stratified
/// bootstrap seeded by `boot`.
pub fn score_method(
    out: &MethodOutput,
    truth: &[&str],
    label_set: &[String],
    malignant: &MalignantSet,
    boot: &BootstrapConfig,
) -> Result<MetricRecord> {
    let accuracy = metrics::multiclass_accuracy(&out.top1, truth)?;
    let map = metrics::mean_average_precision(&out.dists, truth, label_set)?;
    let positive: Vec<bool> = truth.iter().map(|t| malignant.contains(t)).collect();
    let both = positive.contains(&true) && positive.contains(&false);

    let mut record = MetricRecord {
        accuracy,
        sens_25: None,
        spec_25: None,
        sens_50: None,
        spec_50: None,
        auc: None,
        map: map.map,
        map_skipped: map.skipped,
    };
    if both {
        let op25 = metrics::operating_point(&out.malignancy, &positive, CUTOFFS[0])?;
        let op50 = metrics::operating_point(&out.malignancy, &positive, CUTOFFS[1])?;
        record.sens_25 = Some(op25.sensitivity);
        record.spec_25 = Some(op25.specificity);
        record.sens_50 = Some(op50.sensitivity);
        record.spec_50 = Some(op50.specificity);

        let pos: Vec<usize> = (0..positive.len()).filter(|&i| positive[i]).collect();
        let neg: Vec<usize> = (0..positive.len()).filter(|&i| !positive[i]).collect();
        let scores = &out.malignancy;
        let auc_of = |idx: &[usize]| {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let t: Vec<bool> = idx.iter().map(|&i| positive[i]).collect();
            metrics::auc(&s, &t).ok().flatten()
        };
        record.auc = Some(stats::bootstrap_ci(auc_of, &pos, &neg, boot)?);
    }
    Ok(record)
}

/// One CBIR row of an intra table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntraRow {
    pub k: usize,
    pub metrics: MetricRecord,
    /// DeLong comparison of the CBIR and softmax malignancy AUCs.
    pub delong: Option<AucComparison>,
    /// Why `delong` is missing, when it is.
    pub delong_note: Option<String>,
    pub p_holm: Option<f64>,
    /// False once the sequential Holm procedure has stopped.
    pub holm_evaluated: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    pub method: String,
    pub k: Option<usize>,
    pub points: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub dataset: String,
    pub method: String,
    pub k: Option<usize>,
    pub image_id: String,
    pub truth: String,
    pub prediction: String,
    pub malignancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntraReport {
    pub dataset: String,
    pub queries: usize,
    pub pool: usize,
    pub malignant: Vec<String>,
    pub rows: Vec<IntraRow>,
    pub softmax: MetricRecord,
    /// `(k, CBIR accuracy)` for every k of the list, or 1..=32 when sweeping.
    pub accuracy_by_k: Vec<(usize, f64)>,
    #[serde(skip)]
    pub roc: Vec<RocCurve>,
    #[serde(skip)]
    pub predictions: Vec<PredictionRow>,
}

/// Intra-source evaluation of one dataset: CBIR at every k of the list,
/// the softmax reference, DeLong comparisons and their Holm adjustment.
pub fn evaluate_intra(
    name: &str,
    data: &Dataset,
    sm: &SoftmaxTable,
    malignant: &MalignantSet,
    settings: &RunSettings,
) -> Result<IntraReport> {
    settings.validate()?;
    let pool = dataset::build_retrieval_pool(data)?;
    let index = NormalizedIndex::build(&pool)?;
    let k_max = settings.max_k();
    if k_max > index.len() {
        return Err(Error::KExceedsPool {
            k: k_max,
            pool: index.len(),
        });
    }
    let queries: Vec<&EmbeddingRecord> = data.split(Split::Test).collect();
    if queries.is_empty() {
        return Err(Error::TooFewCases {
            what: "test split",
            needed: 1,
        });
    }
    let truth: Vec<&str> = queries.iter().map(|r| r.label.as_str()).collect();
    let positive: Vec<bool> = truth.iter().map(|t| malignant.contains(t)).collect();
    let results = retrieve(&index, &queries, k_max)?;
    let label_set = data.label_set();

    let soft = MethodOutput::softmax(&queries, sm, malignant)?;
    let softmax = score_method(
        &soft,
        &truth,
        label_set,
        malignant,
        &settings.bootstrap(&format!("intra/{name}/softmax")),
    )?;

    let outputs = settings
        .k_list
        .par_iter()
        .map(|&k| {
            let rk: Vec<RetrievalResult> = results.iter().map(|r| prefix(r, k)).collect();
            let out = MethodOutput::cbir(&rk, &index, malignant)?;
            let record = score_method(
                &out,
                &truth,
                label_set,
                malignant,
                &settings.bootstrap(&format!("intra/{name}/cbir/{k}")),
            )?;
            let (delong, note) = match stats::delong_compare(&out.malignancy, &soft.malignancy, &positive) {
                Ok(c) => (Some(c), None),
                Err(e) if e.is_validation() || matches!(e, Error::DegenerateVariance { .. }) => {
                    (None, Some(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            Ok((k, out, record, delong, note))
        })
        .collect::<Result<Vec<_>>>()?;

    let defined: Vec<(usize, f64)> = outputs
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.3.map(|c| (i, c.p_value)))
        .collect();
    let p: Vec<f64> = defined.iter().map(|d| d.1).collect();
    let holm = stats::holm_adjust(&p, settings.alpha)?;
    let mut holm_by_row = BTreeMap::new();
    for (j, &(i, _)) in defined.iter().enumerate() {
        holm_by_row.insert(i, (holm.adjusted[j], holm.evaluated[j]));
    }

    let mut roc = Vec::new();
    let mut predictions = Vec::new();
    let mut rows = Vec::new();
    let both = positive.contains(&true) && positive.contains(&false);
    for (i, (k, out, record, delong, note)) in outputs.into_iter().enumerate() {
        if both {
            roc.push(RocCurve {
                method: "cbir".into(),
                k: Some(k),
                points: metrics::roc_auc(&out.malignancy, &positive)?.points,
            });
        }
        push_predictions(&mut predictions, name, "cbir", Some(k), &queries, &out);
        let h = holm_by_row.get(&i);
        rows.push(IntraRow {
            k,
            metrics: record,
            delong,
            delong_note: note,
            p_holm: h.map(|h| h.0),
            holm_evaluated: h.map(|h| h.1),
        });
    }
    if both {
        roc.push(RocCurve {
            method: "softmax".into(),
            k: None,
            points: metrics::roc_auc(&soft.malignancy, &positive)?.points,
        });
    }
    push_predictions(&mut predictions, name, "softmax", None, &queries, &soft);

    let sweep: Vec<usize> = if settings.k_sweep {
        (1..=SWEEP_MAX_K).collect()
    } else {
        settings.k_list.clone()
    };
    let accuracy_by_k = sweep
        .iter()
        .map(|&k| {
            let top1 = results
                .iter()
                .map(|r| classify::cbir_top1(&prefix(r, k), &index))
                .collect::<Result<Vec<_>>>()?;
            Ok((k, metrics::multiclass_accuracy(&top1, &truth)?))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(IntraReport {
        dataset: name.to_string(),
        queries: queries.len(),
        pool: index.len(),
        malignant: malignant.iter().map(str::to_string).collect(),
        rows,
        softmax,
        accuracy_by_k,
        roc,
        predictions,
    })
}

fn push_predictions(
    rows: &mut Vec<PredictionRow>,
    dataset: &str,
    method: &str,
    k: Option<usize>,
    queries: &[&EmbeddingRecord],
    out: &MethodOutput,
) {
    for (i, q) in queries.iter().enumerate() {
        rows.push(PredictionRow {
            dataset: dataset.to_string(),
            method: method.to_string(),
            k,
            image_id: q.image_id.clone(),
            truth: q.label.clone(),
            prediction: out.top1[i].clone(),
            malignancy: out.malignancy[i],
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCell {
    pub train: String,
    pub test: String,
    pub cbir: String,
    pub k: usize,
    pub map: f64,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossSoftmax {
    pub train: String,
    pub test: String,
    pub map: f64,
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossReport {
    /// Ordered by train, test, cbir source, then k.
    pub cells: Vec<CrossCell>,
    /// One softmax mAP per (train, test) pair.
    pub softmax: Vec<CrossSoftmax>,
}

impl CrossReport {
    pub fn softmax_map(&self, train: &str, test: &str) -> Option<f64> {
        self.softmax
            .iter()
            .find(|s| s.train == train && s.test == test)
            .map(|s| s.map)
    }

    pub fn cell(&self, train: &str, test: &str, cbir: &str, k: usize) -> Option<&CrossCell> {
        self.cells
            .iter()
            .find(|c| c.train == train && c.test == test && c.cbir == cbir && c.k == k)
    }
}

/// Mean cosine of one query to the same-label and to the other pool images.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityPair {
    pub source: String,
    pub query_id: String,
    pub label: String,
    pub same_mean: f64,
    pub different_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityTest {
    /// A class name, or `all` for the pooled comparison.
    pub group: String,
    pub n: usize,
    pub same_mean: f64,
    pub different_mean: f64,
    pub normality: Option<NormalityDecision>,
    pub result: Option<PairedTestResult>,
    /// Why `result` is missing, when it is.
    pub note: Option<String>,
    /// Holm-adjusted over the per-class family; `None` for `all`.
    pub p_holm: Option<f64>,
    pub holm_evaluated: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityReport {
    pub source: String,
    /// Queries without a same-label or different-label pool image.
    pub dropped: usize,
    pub per_class: Vec<SimilarityTest>,
    pub overall: SimilarityTest,
    #[serde(skip)]
    pub pairs: Vec<SimilarityPair>,
}

/// Paired same- versus different-label similarity of every test query of
/// `queries` against the train split of `pool`, tested per class (normality
/// gate, then t or Wilcoxon) with Holm adjustment across classes.
pub fn similarity_report(
    source: &str,
    queries: &Dataset,
    pool: &Dataset,
    alpha: f64,
) -> Result<SimilarityReport> {
    let pool = dataset::build_retrieval_pool(pool)?;
    let index = NormalizedIndex::build(&pool)?;
    let test: Vec<&EmbeddingRecord> = queries.split(Split::Test).collect();
    let labels = index.labels();

    let computed = test
        .par_iter()
        .map(|q| {
            let sims = index.similarities(&q.vector)?;
            let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
            for (s, l) in sims.iter().zip(labels) {
                if *l == q.label {
                    same += s;
                    ns += 1;
                } else {
                    diff += s;
                    nd += 1;
                }
            }
            Ok((ns > 0 && nd > 0).then(|| SimilarityPair {
                source: source.to_string(),
                query_id: q.image_id.clone(),
                label: q.label.clone(),
                same_mean: same / ns as f64,
                different_mean: diff / nd as f64,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let dropped = computed.iter().filter(|p| p.is_none()).count();
    let pairs: Vec<SimilarityPair> = computed.into_iter().flatten().collect();

    let mut classes: Vec<&str> = pairs.iter().map(|p| p.label.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class: Vec<SimilarityTest> = classes
        .iter()
        .map(|c| similarity_test(c, pairs.iter().filter(|p| p.label == *c)))
        .collect();
    let overall = similarity_test("all", pairs.iter());

    let defined: Vec<(usize, f64)> = per_class
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.result.map(|r| (i, r.p_value)))
        .collect();
    let p: Vec<f64> = defined.iter().map(|d| d.1).collect();
    let holm = stats::holm_adjust(&p, alpha)?;
    for (j, &(i, _)) in defined.iter().enumerate() {
        per_class[i].p_holm = Some(holm.adjusted[j]);
        per_class[i].holm_evaluated = Some(holm.evaluated[j]);
    }
    Ok(SimilarityReport {
        source: source.to_string(),
        dropped,
        per_class,
        overall,
        pairs,
    })
}

fn similarity_test<'a>(group: &str, pairs: impl Iterator<Item = &'a SimilarityPair>) -> SimilarityTest {
    let (mut same, mut diff, mut diffs) = (0.0, 0.0, Vec::new());
    for p in pairs {
        same += p.same_mean;
        diff += p.different_mean;
        diffs.push(p.same_mean - p.different_mean);
    }
    let n = diffs.len();
    let mut t = SimilarityTest {
        group: group.to_string(),
        n,
        same_mean: if n > 0 { same / n as f64 } else { f64::NAN },
        different_mean: if n > 0 { diff / n as f64 } else { f64::NAN },
        normality: None,
        result: None,
        note: None,
        p_holm: None,
        holm_evaluated: None,
    };
    match stats::paired_test(&diffs) {
        Ok((gate, result)) => {
            t.normality = Some(gate);
            t.result = Some(result);
        }
        Err(e) => t.note = Some(e.to_string()),
    }
    t
}

/// Everything one `grid` run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentGrid {
    pub settings: RunSettings,
    pub intra: Vec<IntraReport>,
    pub cross: Option<CrossReport>,
    pub similarity: Vec<SimilarityReport>,
}

pub const REPORT_FILES: [&str; 10] = [
    "table2.csv",
    "table2.json",
    "table3.csv",
    "table3.json",
    "roc_points.csv",
    "accuracy_vs_k.csv",
    "similarity_pairs.csv",
    "similarity_tests.csv",
    "predictions.csv",
    "metrics.json",
];

fn round3(x: f64) -> String {
    format!("{x:.3}")
}

fn opt3(x: Option<f64>) -> String {
    x.map(round3).unwrap_or_default()
}

/// Writes the report files into `dir`, then re-reads `predictions.csv` and
/// checks every accuracy in the tables against it. A non-empty `dir` is
/// refused unless `force` is set.
pub fn emit_reports(grid: &ExperimentGrid, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::OutputExists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut csv_file = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> Result<()> {
        let path = dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(header).map_err(|e| csv_error(&path, e))?;
        for r in rows {
            w.write_record(&r).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    let mut t2 = Vec::new();
    for r in &grid.intra {
        for row in &r.rows {
            t2.push(table2_row(
                &r.dataset,
                &format!("CBIR k={}", row.k),
                &row.metrics,
                Some(row),
            ));
        }
        t2.push(table2_row(&r.dataset, "Softmax", &r.softmax, None));
    }
    csv_file(
        "table2.csv",
        &[
            "dataset", "method", "accuracy", "sens_25", "spec_25", "sens_50", "spec_50", "auc", "auc_low",
            "auc_high", "map", "p_delong", "p_holm",
        ],
        t2,
    )?;

    let mut t3 = Vec::new();
    if let Some(c) = &grid.cross {
        for cell in &c.cells {
            t3.push(vec![
                cell.train.clone(),
                cell.test.clone(),
                cell.cbir.clone(),
                cell.k.to_string(),
                round3(cell.map),
                opt3(c.softmax_map(&cell.train, &cell.test)),
            ]);
        }
    }
    csv_file(
        "table3.csv",
        &["train", "test", "cbir", "k", "map", "softmax_map"],
        t3,
    )?;

    let mut roc = Vec::new();
    for r in &grid.intra {
        for curve in &r.roc {
            for p in &curve.points {
                roc.push(vec![
                    r.dataset.clone(),
                    curve.method.clone(),
                    curve.k.map(|k| k.to_string()).unwrap_or_default(),
                    p.threshold.to_string(),
                    p.sensitivity.to_string(),
                    p.specificity.to_string(),
                ]);
            }
        }
    }
    csv_file(
        "roc_points.csv",
        &[
            "dataset",
            "method",
            "k",
            "threshold",
            "sensitivity",
            "specificity",
        ],
        roc,
    )?;

    let mut acc = Vec::new();
    for r in &grid.intra {
        for &(k, a) in &r.accuracy_by_k {
            acc.push(vec![
                r.dataset.clone(),
                k.to_string(),
                a.to_string(),
                r.softmax.accuracy.to_string(),
            ]);
        }
    }
    csv_file(
        "accuracy_vs_k.csv",
        &["dataset", "k", "cbir_accuracy", "softmax_accuracy"],
        acc,
    )?;

    let mut sim = Vec::new();
    let mut sim_tests = Vec::new();
    for s in &grid.similarity {
        for p in &s.pairs {
            sim.push(vec![
                p.source.clone(),
                p.query_id.clone(),
                p.label.clone(),
                p.same_mean.to_string(),
                p.different_mean.to_string(),
            ]);
        }
        for t in s.per_class.iter().chain(std::iter::once(&s.overall)) {
            sim_tests.push(vec![
                s.source.clone(),
                t.group.clone(),
                t.n.to_string(),
                round3(t.same_mean),
                round3(t.different_mean),
                t.result
                    .map(|r| format!("{:?}", r.test).to_lowercase())
                    .unwrap_or_default(),
                t.result.map(|r| stats::format_p(r.p_value)).unwrap_or_default(),
                holm_cell(t.p_holm, t.holm_evaluated),
            ]);
        }
    }
    csv_file(
        "similarity_pairs.csv",
        &["source", "query_id", "label", "same_mean", "different_mean"],
        sim,
    )?;
    csv_file(
        "similarity_tests.csv",
        &[
            "source",
            "group",
            "n",
            "same_mean",
            "different_mean",
            "test",
            "p",
            "p_holm",
        ],
        sim_tests,
    )?;

    let preds: Vec<Vec<String>> = grid
        .intra
        .iter()
        .flat_map(|r| &r.predictions)
        .map(|p| {
            vec![
                p.dataset.clone(),
                p.method.clone(),
                p.k.map(|k| k.to_string()).unwrap_or_default(),
                p.image_id.clone(),
                p.truth.clone(),
                p.prediction.clone(),
                p.malignancy.to_string(),
            ]
        })
        .collect();
    csv_file(
        "predictions.csv",
        &[
            "dataset",
            "method",
            "k",
            "image_id",
            "truth",
            "prediction",
            "malignancy",
        ],
        preds,
    )?;

    written.push(write_json(&dir.join("table2.json"), &grid.intra)?);
    written.push(write_json(&dir.join("table3.json"), &grid.cross)?);
    written.push(write_json(&dir.join("metrics.json"), grid)?);

    audit_accuracy(grid, &dir.join("predictions.csv"))?;
    written.sort();
    Ok(written)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Audit(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e.to_string())
}

fn holm_cell(p: Option<f64>, evaluated: Option<bool>) -> String {
    match (p, evaluated) {
        (Some(_), Some(false)) => "not evaluated".into(),
        (Some(p), _) => stats::format_p(p),
        _ => String::new(),
    }
}

fn table2_row(dataset: &str, method: &str, m: &MetricRecord, row: Option<&IntraRow>) -> Vec<String> {
    vec![
        dataset.to_string(),
        method.to_string(),
        round3(m.accuracy),
        opt3(m.sens_25),
        opt3(m.spec_25),
        opt3(m.sens_50),
        opt3(m.spec_50),
        opt3(m.auc.map(|c| c.point)),
        opt3(m.auc.map(|c| c.low)),
        opt3(m.auc.map(|c| c.high)),
        round3(m.map),
        row.and_then(|r| r.delong)
            .map(|d| stats::format_p(d.p_value))
            .unwrap_or_default(),
        row.map(|r| holm_cell(r.p_holm, r.holm_evaluated))
            .unwrap_or_default(),
    ]
}

/// Recomputes every table accuracy from the written per-image predictions.
pub fn audit_accuracy(grid: &ExperimentGrid, predictions: &Path) -> Result<()> {
    let mut reader = csv::Reader::from_path(predictions).map_err(|e| csv_error(predictions, e))?;
    let mut tally: BTreeMap<(String, String, Option<usize>), (usize, usize)> = BTreeMap::new();
    for row in reader.deserialize::<PredictionRow>() {
        let row = row.map_err(|e| csv_error(predictions, e))?;
        let entry = tally.entry((row.dataset, row.method, row.k)).or_default();
        entry.1 += 1;
        if row.prediction == row.truth {
            entry.0 += 1;
        }
    }
    let check = |dataset: &str, method: &str, k: Option<usize>, reported: f64| -> Result<()> {
        let (hits, n) = tally
            .get(&(dataset.to_string(), method.to_string(), k))
            .copied()
            .ok_or_else(|| Error::Audit(format!("no predictions for {dataset}/{method}/{k:?}")))?;
        let recomputed = hits as f64 / n as f64;
        if recomputed != reported {
            return Err(Error::Audit(format!(
                "{dataset}/{method}/{k:?}: table accuracy {reported} but predictions give {recomputed}"
            )));
        }
        Ok(())
    };
    for r in &grid.intra {
        for row in &r.rows {
            check(&r.dataset, "cbir", Some(row.k), row.metrics.accuracy)?;
        }
        check(&r.dataset, "softmax", None, r.softmax.accuracy)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn config(intra: &[&str], k_list: &[usize]) -> ExperimentConfig {
        ExperimentConfig {
            seed: 3,
            replicates: 200,
            k_list: k_list.to_vec(),
            k_sweep: false,
            alpha: 0.05,
            datasets: vec![],
            embeddings: vec![],
            intra: intra.iter().map(|s| s.to_string()).collect(),
            cross: None,
        }
    }

    fn embedding(network: &str, spec: &SynthSpec) -> Embedding {
        let (data, softmax) = generate(spec).unwrap();
        Embedding {
            network: network.into(),
            dataset: spec.name.clone(),
            data,
            softmax: Some(softmax),
        }
    }

    fn toy(name: &str, seed: u64) -> SynthSpec {
        SynthSpec::gaussian(name, &["bkl", "mel", "nevus"], 16, 0.8, 30, 15, seed)
    }

    #[test]
    fn intra_shape() {
        let exp = Experiment::from_parts(
            &config(&["toy"], &[2, 16]),
            vec![embedding("toy", &toy("toy", 1))],
        )
        .unwrap();
        let reports = exp.run_intra().unwrap();
        assert_eq!(reports.len(), 1);
        let r = &reports[0];
        assert_eq!(r.rows.iter().map(|row| row.k).collect::<Vec<_>>(), [2, 16]);
        for row in &r.rows {
            assert!(row.metrics.auc.is_some() && row.metrics.sens_25.is_some());
            assert!(row.delong.is_some() && row.p_holm.is_some());
        }
        assert!(r.softmax.auc.is_some());
        assert_eq!(r.malignant, ["mel"]);
        assert_eq!(r.predictions.len(), 3 * 45);
        assert_eq!(r.roc.len(), 3);
    }

    #[test]
    fn intra_is_deterministic() {
        let run = || {
            let exp = Experiment::from_parts(
                &config(&["toy"], &[2, 16]),
                vec![embedding("toy", &toy("toy", 1))],
            )
            .unwrap();
            serde_json::to_string(&exp.run().unwrap()).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn validation_happens_up_front() {
        let e = || vec![embedding("toy", &toy("toy", 1))];
        assert!(matches!(
            Experiment::from_parts(&config(&["toy"], &[2, 200]), e()),
            Err(Error::KExceedsPool { .. })
        ));
        assert!(Experiment::from_parts(&config(&["toy"], &[4, 2]), e()).is_err());
        assert!(Experiment::from_parts(&config(&["other"], &[2]), e()).is_err());
        assert!(Experiment::from_parts(&config(&[], &[2]), e()).is_err());
        let mut no_softmax = e();
        no_softmax[0].softmax = None;
        assert!(Experiment::from_parts(&config(&["toy"], &[2]), no_softmax).is_err());
        let mut cfg = config(&["toy"], &[2]);
        cfg.datasets.push(DatasetConfig {
            name: "toy".into(),
            malignant: Some(vec!["scc".into()]),
        });
        assert!(Experiment::from_parts(&cfg, e()).is_err());
        let mut sweep = config(&["toy"], &[2]);
        sweep.k_sweep = true;
        assert!(Experiment::from_parts(&sweep, e()).is_ok());
    }

    #[test]
    fn cross_diagonal_matches_intra() {
        let mut cfg = config(&["a"], &[2, 8]);
        cfg.cross = Some(CrossConfig {
            train: vec!["a".into()],
            test: vec!["a".into()],
            cbir: vec!["a".into()],
        });
        let exp = Experiment::from_parts(&cfg, vec![embedding("a", &toy("a", 5))]).unwrap();
        let grid = exp.run().unwrap();
        let cross = grid.cross.as_ref().unwrap();
        assert_eq!(cross.cells.len(), 2);
        for row in &grid.intra[0].rows {
            assert_eq!(cross.cell("a", "a", "a", row.k).unwrap().map, row.metrics.map);
        }
        assert_eq!(cross.softmax_map("a", "a"), Some(grid.intra[0].softmax.map));
    }

    #[test]
    fn cross_grid_is_complete() {
        let mut cfg = config(&[], &[2, 4]);
        let names = ["a", "b"];
        cfg.cross = Some(CrossConfig {
            train: names.iter().map(|s| s.to_string()).collect(),
            test: names.iter().map(|s| s.to_string()).collect(),
            cbir: names.iter().map(|s| s.to_string()).collect(),
        });
        let mut embs = Vec::new();
        for (i, net) in names.iter().enumerate() {
            for (j, ds) in names.iter().enumerate() {
                embs.push(embedding(net, &toy(ds, (10 * i + j) as u64)));
            }
        }
        let cross = Experiment::from_parts(&cfg, embs)
            .unwrap()
            .run_cross()
            .unwrap()
            .unwrap();
        assert_eq!(cross.cells.len(), 2 * 2 * 2 * 2);
        assert_eq!(cross.softmax.len(), 4);
    }

    #[test]
    fn similarity_identical_same_class() {
        // every pool vector of a class equals the class's query direction
        let mut spec = SynthSpec::gaussian("s", &["a", "b"], 4, 1e-9, 5, 5, 2);
        spec.classes[0].mean = Some(vec![1.0, 0.0, 0.0, 0.0]);
        spec.classes[1].mean = Some(vec![0.0, 1.0, 0.0, 0.0]);
        let (ds, _) = generate(&spec).unwrap();
        let rep = similarity_report("s", &ds, &ds, 0.05).unwrap();
        assert_eq!(rep.dropped, 0);
        for p in &rep.pairs {
            assert!((p.same_mean - 1.0).abs() < 1e-6);
            assert!(p.same_mean > p.different_mean);
        }
    }

    #[test]
    fn reports_round_trip_and_refuse_overwrite() {
        let mut cfg = config(&["toy"], &[2, 4]);
        cfg.k_sweep = true;
        let mut spec = toy("toy", 1);
        spec.train_per_class = 12;
        let grid = Experiment::from_parts(&cfg, vec![embedding("toy", &spec)])
            .unwrap()
            .run()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let files = emit_reports(&grid, &out, false).unwrap();
        assert_eq!(files.len(), REPORT_FILES.len());
        for f in REPORT_FILES {
            assert!(out.join(f).is_file(), "{f}");
        }
        let acc = fs::read_to_string(out.join("accuracy_vs_k.csv")).unwrap();
        assert_eq!(acc.lines().count(), 1 + SWEEP_MAX_K);
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["intra"][0]["rows"].as_array().unwrap().len(), 2);
        assert!(matches!(
            emit_reports(&grid, &out, false),
            Err(Error::OutputExists(_))
        ));
        emit_reports(&grid, &out, true).unwrap();
    }

    #[test]
    fn audit_catches_tampering() {
        let grid = Experiment::from_parts(&config(&["toy"], &[2]), vec![embedding("toy", &toy("toy", 1))])
            .unwrap()
            .run()
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_reports(&grid, dir.path(), true).unwrap();
        let mut tampered = grid.clone();
        tampered.intra[0].rows[0].metrics.accuracy += 0.01;
        assert!(matches!(
            audit_accuracy(&tampered, &dir.path().join("predictions.csv")),
            Err(Error::Audit(_))
        ));
    }

    #[test]
    fn config_parses() {
        let text = r#"
            seed = 9
            intra = ["edra"]
            [[dataset]]
            name = "edra"
            malignant = ["mel"]
            [[embedding]]
            network = "edra"
            dataset = "edra"
            manifest = "e.manifest.csv"
            [cross]
            train = ["edra"]
            test = ["edra"]
            cbir = ["edra"]
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.k_list, DEFAULT_K_LIST);
        assert_eq!(cfg.replicates, 2000);
        assert_eq!(cfg.embeddings[0].softmax, None);
        assert!(ExperimentConfig::from_toml_str("seed = 1\nbogus = 2").is_err());
    }
}
