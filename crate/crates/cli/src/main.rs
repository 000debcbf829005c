use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use cbir_dx_core::classify::{self, MalignantSet};
use cbir_dx_core::dataset::{self, Dataset, SoftmaxTable, Split};
use cbir_dx_core::experiment::{self, Experiment, ExperimentConfig, ExperimentGrid, RunSettings};
use cbir_dx_core::index::Query;
use cbir_dx_core::synth::{self, SynthSpec};
use cbir_dx_core::{stats, Error, NormalizedIndex};
use clap::{Args, Parser, Subcommand};

/// Retrieval-based diagnosis and its evaluation against softmax output.
///
/// Parallelism is bounded by the CBIR_DX_THREADS environment variable.
/// Exit status: 0 success, 1 invalid input, 2 runtime failure.
#[derive(Parser)]
#[command(name = "cbir-dx", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a dataset (and its softmax table) or a grid config.
    Validate(ValidateArgs),
    /// Print the k most similar pool images of one query image as CSV.
    Query(QueryArgs),
    /// Per-test-image CBIR (and softmax) predictions as CSV.
    Predict(PredictArgs),
    /// Intra-dataset evaluation of one dataset.
    Evaluate(EvaluateArgs),
    /// DeLong comparison of two score files, Holm-adjusted across k.
    Compare(CompareArgs),
    /// Run a full experiment grid from a config file.
    Grid(GridArgs),
    /// Same- versus different-label similarity report.
    Simreport(SimreportArgs),
    /// Generate a synthetic dataset, or run the oracle self-check.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Dataset manifest (NAME.manifest.csv).
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    dataset: Option<PathBuf>,
    /// Softmax table; defaults to NAME.softmax.csv when that file exists.
    #[arg(long, requires = "dataset")]
    softmax: Option<PathBuf>,
    /// Grid config; loads and validates every referenced file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    query_id: String,
    #[arg(long)]
    k: usize,
}

#[derive(Args)]
struct Malignant {
    /// Comma-separated malignant labels [default: bcc, mel, scc present in the label set]
    #[arg(long, value_delimiter = ',')]
    malignant: Option<Vec<String>>,
}

impl Malignant {
    fn resolve(&self, ds: &Dataset) -> cbir_dx_core::Result<MalignantSet> {
        match &self.malignant {
            Some(m) => MalignantSet::new(m.iter(), ds.label_set()),
            None => MalignantSet::default_for(ds.label_set()),
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    softmax: Option<PathBuf>,
    #[command(flatten)]
    malignant: Malignant,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Softmax table [default: NAME.softmax.csv]
    #[arg(long)]
    softmax: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = experiment::DEFAULT_K_LIST)]
    k_list: Vec<usize>,
    /// Also report accuracy for every k in 1..=32.
    #[arg(long)]
    k_sweep: bool,
    #[arg(long, default_value_t = stats::DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    malignant: Malignant,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Scores of method A: image_id,score or image_id,k,score.
    #[arg(long)]
    a: PathBuf,
    /// Scores of method B, same layout; without a k column it serves every k of A.
    #[arg(long)]
    b: PathBuf,
    /// Binary truth: image_id,positive (1/0 or true/false).
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = stats::ALPHA)]
    alpha: f64,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also report accuracy for every k in 1..=32.
    #[arg(long)]
    k_sweep: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SimreportArgs {
    /// Dataset whose test images are the queries.
    #[arg(long)]
    dataset: PathBuf,
    /// Dataset whose train split is the pool [default: --dataset]
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long, default_value_t = stats::ALPHA)]
    alpha: f64,
    /// Also write the per-query pairs here as CSV.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator spec (TOML).
    #[arg(long, required_unless_present = "self_check", requires = "out")]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run every fast path against its brute-force oracle instead.
    #[arg(long, conflicts_with = "spec")]
    self_check: bool,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation) || c.is::<UsageError>());
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}

/// Bad command-line or environment input that is not a core error.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("CBIR_DX_THREADS") else {
        return Ok(());
    };
    let n: usize = value.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        UsageError(format!(
            "CBIR_DX_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Validate(a) => validate(a),
        Command::Query(a) => query(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Compare(a) => compare(a),
        Command::Grid(a) => grid(a),
        Command::Simreport(a) => simreport(a),
        Command::Synth(a) => synth_cmd(a),
    }
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    Ok(dataset::load_manifest(path)?)
}

/// The explicit table, or the sibling `NAME.softmax.csv` when present.
fn softmax_for(
    manifest: &Path,
    explicit: Option<&Path>,
    ds: &Dataset,
) -> anyhow::Result<Option<SoftmaxTable>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = dataset::softmax_path(manifest)?;
            if !p.exists() {
                return Ok(None);
            }
            p
        }
    };
    Ok(Some(dataset::load_softmax(&path, ds)?))
}

fn validate(a: ValidateArgs) -> anyhow::Result<()> {
    if let Some(cfg) = a.config {
        let config = ExperimentConfig::load(&cfg)?;
        Experiment::load(&config)?;
        println!("ok: {}", cfg.display());
        return Ok(());
    }
    let manifest = a.dataset.expect("clap enforces --dataset or --config");
    let ds = load(&manifest)?;
    let sm = softmax_for(&manifest, a.softmax.as_deref(), &ds)?;
    let count = |s| ds.split(s).count();
    println!(
        "ok: {} ({} images, d={}, train={}, valid={}, test={}, labels={}){}",
        ds.name(),
        ds.len(),
        ds.dimensionality(),
        count(Split::Train),
        count(Split::Valid),
        count(Split::Test),
        ds.label_set().join(";"),
        sm.map(|t| format!(", softmax rows={}", t.len()))
            .unwrap_or_default()
    );
    Ok(())
}

fn query(a: QueryArgs) -> anyhow::Result<()> {
    let ds = load(&a.dataset)?;
    let record = ds
        .get(&a.query_id)
        .ok_or_else(|| Error::UnknownImage(a.query_id.clone()))?;
    if record.split == Split::Train {
        bail!(UsageError(format!(
            "{} is in the train split, which is the retrieval pool; query a valid or test image",
            a.query_id
        )));
    }
    let pool = dataset::build_retrieval_pool(&ds)?;
    let index = NormalizedIndex::build(&pool)?;
    let result = index.top_k(
        Query {
            id: &record.image_id,
            vector: &record.vector,
        },
        a.k,
    )?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(["image_id", "label", "similarity"])?;
    for n in &result.neighbors {
        w.write_record([
            n.image_id.as_str(),
            index.label(n.position),
            &n.similarity.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let ds = load(&a.dataset)?;
    let sm = match &a.softmax {
        Some(p) => Some(dataset::load_softmax(p, &ds)?),
        None => None,
    };
    let malignant = a.malignant.resolve(&ds)?;
    let pool = dataset::build_retrieval_pool(&ds)?;
    let index = NormalizedIndex::build(&pool)?;
    let test: Vec<_> = ds.split(Split::Test).collect();
    let queries: Vec<Query<'_>> = test
        .iter()
        .map(|r| Query {
            id: &r.image_id,
            vector: &r.vector,
        })
        .collect();
    let results = index.batch_top_k(&queries, a.k)?;

    let mut header = vec!["image_id".to_string(), "truth".into(), "cbir_top1".into()];
    header.extend(ds.label_set().iter().map(|c| format!("cbir_{c}")));
    header.push("cbir_malignancy".into());
    if let Some(t) = &sm {
        header.push("softmax_top1".into());
        header.extend(t.classes().iter().map(|c| format!("softmax_{c}")));
        header.push("softmax_malignancy".into());
    }
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(&header)?;
    for (r, res) in test.iter().zip(&results) {
        let dist = classify::cbir_distribution(res, &index)?;
        let mut row = vec![
            r.image_id.clone(),
            r.label.clone(),
            classify::cbir_top1(res, &index)?,
        ];
        row.extend(ds.label_set().iter().map(|c| dist.score(c).to_string()));
        row.push(classify::cbir_malignancy(res, &index, &malignant)?.to_string());
        if let Some(t) = &sm {
            let probs = t
                .row(&r.image_id)
                .ok_or_else(|| Error::MissingPrediction(r.image_id.clone()))?;
            row.push(classify::softmax_top1(probs, t.classes())?.to_string());
            row.extend(probs.iter().map(f64::to_string));
            row.push(classify::softmax_malignancy(probs, t.classes(), &malignant)?.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let ds = load(&a.dataset)?;
    let sm = softmax_for(&a.dataset, a.softmax.as_deref(), &ds)?.ok_or_else(|| {
        UsageError(format!(
            "no softmax table for {}; pass --softmax",
            a.dataset.display()
        ))
    })?;
    let malignant = a.malignant.resolve(&ds)?;
    let settings = RunSettings {
        seed: a.seed,
        replicates: a.replicates,
        k_list: a.k_list,
        k_sweep: a.k_sweep,
        alpha: stats::ALPHA,
    };
    let report = experiment::evaluate_intra(ds.name(), &ds, &sm, &malignant, &settings)?;
    let similarity = experiment::similarity_report(ds.name(), &ds, &ds, settings.alpha)?;
    let grid = ExperimentGrid {
        settings,
        intra: vec![report],
        cross: None,
        similarity: vec![similarity],
    };
    write_grid(&grid, &a.out, a.force)
}

fn write_grid(grid: &ExperimentGrid, out: &Path, force: bool) -> anyhow::Result<()> {
    let files = experiment::emit_reports(grid, out, force)?;
    let mut stdout = std::io::stdout().lock();
    for f in files {
        writeln!(stdout, "{}", f.display())?;
    }
    Ok(())
}

fn grid(a: GridArgs) -> anyhow::Result<()> {
    let mut config = ExperimentConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.k_sweep |= a.k_sweep;
    let exp = Experiment::load(&config)?;
    let grid = exp.run()?;
    write_grid(&grid, &a.out, a.force)
}

fn simreport(a: SimreportArgs) -> anyhow::Result<()> {
    let queries = load(&a.dataset)?;
    let pool = match &a.pool {
        Some(p) => load(p)?,
        None => queries.clone(),
    };
    if pool.dimensionality() != queries.dimensionality() {
        return Err(Error::DimensionalityMismatch {
            context: "pool versus query dataset".into(),
            expected: queries.dimensionality(),
            found: pool.dimensionality(),
        }
        .into());
    }
    let report = experiment::similarity_report(queries.name(), &queries, &pool, a.alpha)?;
    if let Some(path) = &a.pairs {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(["source", "query_id", "label", "same_mean", "different_mean"])?;
        for p in &report.pairs {
            w.write_record([
                p.source.as_str(),
                &p.query_id,
                &p.label,
                &p.same_mean.to_string(),
                &p.different_mean.to_string(),
            ])?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record([
        "group",
        "n",
        "same_mean",
        "different_mean",
        "test",
        "statistic",
        "p",
        "p_holm",
        "note",
    ])?;
    for t in report.per_class.iter().chain(std::iter::once(&report.overall)) {
        let holm = match (t.p_holm, t.holm_evaluated) {
            (Some(_), Some(false)) => "not evaluated".to_string(),
            (Some(p), _) => p.to_string(),
            _ => String::new(),
        };
        w.write_record([
            t.group.clone(),
            t.n.to_string(),
            t.same_mean.to_string(),
            t.different_mean.to_string(),
            t.result
                .map(|r| format!("{:?}", r.test).to_lowercase())
                .unwrap_or_default(),
            t.result.map(|r| r.statistic.to_string()).unwrap_or_default(),
            t.result.map(|r| r.p_value.to_string()).unwrap_or_default(),
            holm,
            t.note.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    if report.dropped > 0 {
        eprintln!(
            "dropped {} queries without same- or different-label pool images",
            report.dropped
        );
    }
    Ok(())
}

fn synth_cmd(a: SynthArgs) -> anyhow::Result<()> {
    if a.self_check {
        let outcomes = synth::self_check(a.seed, a.instances)?;
        let mut failed = 0;
        for o in &outcomes {
            if o.passed() {
                println!("PASS {} ({} instances)", o.name, o.instances);
            } else {
                failed += 1;
                println!(
                    "FAIL {} ({} of {} instances; {})",
                    o.name,
                    o.failures,
                    o.instances,
                    o.first_failure.as_deref().unwrap_or("")
                );
            }
        }
        if failed > 0 {
            bail!("{failed} self-check(s) failed");
        }
        return Ok(());
    }
    let spec_path = a.spec.expect("clap enforces --spec");
    let out = a.out.expect("clap enforces --out");
    let text =
        std::fs::read_to_string(&spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: SynthSpec =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?;
    let (ds, sm) = synth::generate(&spec)?;
    let manifest = dataset::write_manifest(&ds, &out)?;
    let softmax = dataset::softmax_path(&manifest)?;
    dataset::write_softmax(&sm, &softmax)?;
    println!("{}", manifest.display());
    println!("{}", dataset::vectors_path(&manifest)?.display());
    println!("{}", softmax.display());
    Ok(())
}

/// Reads `image_id,score` or `image_id,k,score` into k → (id → score); the
/// key is `None` without a k column.
fn read_scores(path: &Path) -> anyhow::Result<BTreeMap<Option<usize>, BTreeMap<String, f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(id), Some(score)) = (col("image_id"), col("score")) else {
        bail!(UsageError(format!(
            "{}: need image_id and score columns",
            path.display()
        )));
    };
    let k_col = col("k");
    let mut out: BTreeMap<Option<usize>, BTreeMap<String, f64>> = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| UsageError(format!("{} row {}: bad {what}", path.display(), line + 1));
        let k = match k_col {
            Some(c) => Some(rec[c].parse::<usize>().map_err(|_| bad("k"))?),
            None => None,
        };
        let s: f64 = rec[score].parse().map_err(|_| bad("score"))?;
        if out.entry(k).or_default().insert(rec[id].to_string(), s).is_some() {
            bail!(bad("duplicate image_id"));
        }
    }
    Ok(out)
}

fn read_truth(path: &Path) -> anyhow::Result<BTreeMap<String, bool>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let v = match rec.get(1).map(|s| s.to_ascii_lowercase()).as_deref() {
            Some("1" | "true") => true,
            Some("0" | "false") => false,
            _ => bail!(UsageError(format!(
                "{} row {}: truth must be 1/0/true/false",
                path.display(),
                line + 1
            ))),
        };
        out.insert(rec[0].to_string(), v);
    }
    Ok(out)
}

fn compare(a: CompareArgs) -> anyhow::Result<()> {
    let sa = read_scores(&a.a)?;
    let sb = read_scores(&a.b)?;
    let truth = read_truth(&a.truth)?;
    let ids: Vec<&String> = truth.keys().collect();
    let y: Vec<bool> = truth.values().copied().collect();

    let mut rows = Vec::new();
    for (k, ma) in &sa {
        let mb = sb
            .get(k)
            .or_else(|| sb.get(&None))
            .ok_or_else(|| UsageError(format!("{} has no scores for k={k:?}", a.b.display())))?;
        let pick = |m: &BTreeMap<String, f64>, file: &Path| {
            ids.iter()
                .map(|id| {
                    m.get(*id)
                        .copied()
                        .ok_or_else(|| Error::MissingPrediction(format!("{id} in {}", file.display())))
                })
                .collect::<Result<Vec<f64>, _>>()
        };
        let cmp = stats::delong_compare(&pick(ma, &a.a)?, &pick(mb, &a.b)?, &y)?;
        rows.push((*k, cmp));
    }
    let holm = stats::holm_adjust(&rows.iter().map(|r| r.1.p_value).collect::<Vec<_>>(), a.alpha)?;
    let mut w = csv::Writer::from_writer(std::io::stdout().lock());
    w.write_record(["k", "auc_a", "auc_b", "z", "p", "p_holm", "evaluated"])?;
    for (i, (k, c)) in rows.iter().enumerate() {
        w.write_record([
            k.map(|k| k.to_string()).unwrap_or_default(),
            c.auc_a.to_string(),
            c.auc_b.to_string(),
            c.z.to_string(),
            c.p_value.to_string(),
            holm.adjusted[i].to_string(),
            holm.evaluated[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
