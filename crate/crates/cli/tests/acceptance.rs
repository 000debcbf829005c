//! Acceptance suite: one PASS/FAIL line per acceptance criterion.
//!
//! Criteria that cannot be measured on the current host (for example
//! multi-core scaling on a single-core machine) print BLOCKED with the
//! reason; they do not fail the run but are not counted as passed either.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cbir_dx_core::classify::{self, MalignantSet};
use cbir_dx_core::dataset;
use cbir_dx_core::experiment::{self, CrossConfig, DatasetConfig, Embedding, Experiment, ExperimentConfig};
use cbir_dx_core::index::{Neighbor, Query, RetrievalResult};
use cbir_dx_core::synth::{self, SynthSpec};
use cbir_dx_core::{metrics, stats, ClassDistribution, Provenance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Blocked(String),
}

type Check = fn() -> Verdict;

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let checks: [(&str, Check); 11] = [
        ("oracle equivalence: retrieval", retrieval_oracle),
        ("oracle equivalence: AUC", auc_oracle),
        ("oracle equivalence: AP/mAP", ap_oracle),
        ("DeLong self-comparison", delong_self),
        ("Wilcoxon exact distribution", wilcoxon_exact),
        ("Holm adjustment", holm),
        ("worked voting and cutoff examples", worked_examples),
        ("direction of effect", direction_of_effect),
        ("similarity separation", similarity_separation),
        ("grid determinism across thread counts", determinism),
        ("retrieval performance", performance),
    ];
    let (mut passed, mut failed, mut blocked) = (0, 0, 0);
    for (name, check) in checks {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Verdict::Pass(d) => {
                passed += 1;
                ("PASS", d)
            }
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Blocked(d) => {
                blocked += 1;
                ("BLOCKED", d)
            }
        };
        println!("{tag:<7} {name} [{secs:.1}s]: {detail}");
    }
    println!("acceptance: {passed} passed, {failed} failed, {blocked} blocked");
    if failed > 0 {
        std::process::exit(1);
    }
}

fn retrieval_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..200 {
        let (pool, query, k) = synth::random_retrieval_instance(&mut rng, 2000, 128);
        let index = synth::index_from_vectors(&pool).unwrap();
        let fast: Vec<usize> = index
            .top_k(
                Query {
                    id: "q",
                    vector: &query,
                },
                k,
            )
            .unwrap()
            .neighbors
            .iter()
            .map(|n| n.position)
            .collect();
        let slow = synth::brute_top_k(&pool, &query, k).unwrap();
        ties += slow.windows(2).filter(|w| w[0].1 == w[1].1).count();
        if fast != slow.iter().map(|p| p.0).collect::<Vec<_>>() {
            mismatches += 1;
        }
    }
    let took = start.elapsed();
    verdict(
        mismatches == 0 && took < Duration::from_secs(10),
        format!("{mismatches} of 200 id lists differ ({ties} tied neighbor pairs exercised), {took:.2?} (limit 10s)"),
    )
}

fn auc_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (s, t) = synth::random_scored_instance(&mut rng, 500, 1);
        let fast = metrics::roc_auc(&s, &t).unwrap().auc;
        worst = worst.max((fast - synth::brute_auc(&s, &t).unwrap()).abs());
    }
    verdict(
        worst <= 1e-12,
        format!("max |trapezoid - pair count| = {worst:e} over 200 instances"),
    )
}

fn ap_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (s, t) = synth::random_scored_instance(&mut rng, 500, 1);
        let fast = metrics::average_precision(&s, &t).unwrap();
        worst = worst.max((fast - synth::brute_ap(&s, &t).unwrap()).abs());
    }
    let classes: Vec<String> = ["a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
    for _ in 0..50 {
        let n = rng.random_range(5..200);
        let truth: Vec<&str> = (0..n).map(|_| classes[rng.random_range(0..3)].as_str()).collect();
        let dists: Vec<ClassDistribution> = (0..n)
            .map(|_| ClassDistribution {
                scores: classes
                    .iter()
                    .map(|c| (c.clone(), f64::from(rng.random_range(0..8u8)) / 8.0))
                    .collect(),
                provenance: Provenance::Softmax,
            })
            .collect();
        let fast = metrics::mean_average_precision(&dists, &truth, &classes)
            .unwrap()
            .map;
        worst = worst.max((fast - synth::brute_map(&dists, &truth, &classes).unwrap()).abs());
    }
    let fixture = metrics::average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    verdict(
        worst <= 1e-12 && (fixture - 0.833333).abs() <= 1e-6,
        format!(
            "max |step sum - recount| = {worst:e} over 200 AP + 50 mAP instances; fixture AP = {fixture:.6}"
        ),
    )
}

fn delong_self() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut not_one, mut worst) = (0, 0.0f64);
    for _ in 0..50 {
        let (s, t) = synth::random_scored_instance(&mut rng, 400, 2);
        let c = stats::delong_compare(&s, &s, &t).unwrap();
        if c.p_value != 1.0 {
            not_one += 1;
        }
        worst = worst.max((c.auc_a - metrics::roc_auc(&s, &t).unwrap().auc).abs());
    }
    verdict(
        not_one == 0 && worst <= 1e-12,
        format!("{not_one} of 50 fixtures with p != 1; max |DeLong AUC - ROC AUC| = {worst:e}"),
    )
}

fn wilcoxon_exact() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut differ = 0;
    for i in 0..100 {
        let d = synth::random_diffs(&mut rng, 1 + i % 10);
        let fast = stats::wilcoxon_signed_rank(&d).unwrap();
        if !fast.exact || fast.p_value != synth::brute_wilcoxon_exact(&d).unwrap() {
            differ += 1;
        }
    }
    verdict(
        differ == 0,
        format!("{differ} of 100 vectors (n = 1..10) differ from 2^n enumeration"),
    )
}

fn holm() -> Verdict {
    let fixture = stats::holm_adjust(&[0.01, 0.04, 0.03], 0.05).unwrap();
    let expect = [0.03, 0.06, 0.06];
    let fixture_ok = fixture
        .adjusted
        .iter()
        .zip(expect)
        .all(|(a, e)| (a - e).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..20);
        let p: Vec<f64> = (0..m)
            .map(|_| rng.random_range(0.0..0.1f64).powi(2) * 10.0)
            .collect();
        let h = stats::holm_adjust(&p, 0.05).unwrap();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
        let stop = order.iter().position(|&i| h.adjusted[i] >= 0.05);
        let flags_ok = order
            .iter()
            .enumerate()
            .all(|(rank, &i)| h.evaluated[i] == stop.is_none_or(|s| rank <= s));
        if !flags_ok || p.iter().zip(&h.adjusted).any(|(x, a)| a < x || *a > 1.0) {
            violations += 1;
        }
    }
    let stop_fixture = stats::holm_adjust(&[0.001, 0.2, 0.01, 0.5], 0.05).unwrap();
    let stop_ok = stop_fixture.evaluated == [true, true, true, false];
    verdict(
        fixture_ok && violations == 0 && stop_ok,
        format!(
            "fixture -> {:?}; {violations} of 1000 random vectors violate bounds or stop flags; stop flags {:?}",
            fixture.adjusted, stop_fixture.evaluated
        ),
    )
}

fn result_with(labels: &[&str]) -> (RetrievalResult, BTreeMap<String, String>) {
    let neighbors = labels
        .iter()
        .enumerate()
        .map(|(i, _)| Neighbor {
            position: i,
            image_id: format!("n{i}"),
            similarity: 1.0 - i as f64 / 100.0,
        })
        .collect();
    let lookup = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (format!("n{i}"), l.to_string()))
        .collect();
    (
        RetrievalResult {
            query_id: "q".into(),
            neighbors,
        },
        lookup,
    )
}

fn worked_examples() -> Verdict {
    let (r, lookup) = result_with(&["mel", "mel", "nevus", "mel", "mel"]);
    let dist = classify::cbir_distribution(&r, &lookup).unwrap();
    let voting_ok = dist.score("mel") == 0.8 && dist.score("nevus") == 0.2;

    let labels: Vec<String> = ["mel", "nevus"].iter().map(|s| s.to_string()).collect();
    let malignant = MalignantSet::new(["mel"], &labels).unwrap();
    let score = |n_mel: usize| {
        let l: Vec<&str> = (0..16).map(|i| if i < n_mel { "mel" } else { "nevus" }).collect();
        let (r, lookup) = result_with(&l);
        classify::cbir_malignancy(&r, &lookup, &malignant).unwrap()
    };
    let (four, three) = (score(4), score(3));
    let op = metrics::operating_point(&[four, three], &[true, false], 0.25).unwrap();
    let cutoff_ok = four == 0.25 && op.sensitivity == 100.0 && op.specificity == 100.0;
    verdict(
        voting_ok && cutoff_ok,
        format!(
            "4 of 5 -> mel {} / nevus {}; 4 of 16 malignant -> {four} called malignant at >= 0.25, 3 of 16 -> {three} benign",
            dist.score("mel"),
            dist.score("nevus")
        ),
    )
}

const EIGHT: [&str; 8] = ["akiec", "bcc", "bkl", "df", "mel", "nevus", "scc", "vasc"];
const THREE: [&str; 3] = ["bkl", "mel", "nevus"];

fn synthetic_study(seed: u64) -> (ExperimentConfig, Vec<Embedding>) {
    // one network trained on a 3-class source; its features also embed the
    // 8-class dataset, whose softmax can only name the 3 known classes
    let mut three = SynthSpec::gaussian("src3", &THREE, 32, 1.0, 150, 60, seed);
    three.mean_scale = 0.35;
    let mut eight = SynthSpec::gaussian("priv8", &EIGHT, 32, 1.0, 80, 30, seed + 1);
    eight.mean_scale = 0.35;
    eight.softmax_classes = Some(THREE.iter().map(|s| s.to_string()).collect());

    let mut embeddings = Vec::new();
    for spec in [&three, &eight] {
        let (data, softmax) = synth::generate(spec).unwrap();
        embeddings.push(Embedding {
            network: "src3".into(),
            dataset: spec.name.clone(),
            data,
            softmax: Some(softmax),
        });
    }
    let config = ExperimentConfig {
        seed,
        replicates: stats::DEFAULT_REPLICATES,
        k_list: experiment::DEFAULT_K_LIST.to_vec(),
        k_sweep: false,
        alpha: stats::ALPHA,
        datasets: vec![DatasetConfig {
            name: "src3".into(),
            malignant: Some(vec!["mel".into()]),
        }],
        embeddings: vec![],
        intra: vec!["src3".into()],
        cross: Some(CrossConfig {
            train: vec!["src3".into()],
            test: vec!["priv8".into()],
            cbir: vec!["src3".into(), "priv8".into()],
        }),
    };
    (config, embeddings)
}

fn direction_of_effect() -> Verdict {
    let start = Instant::now();
    let (config, embeddings) = synthetic_study(2018);
    let exp = Experiment::from_parts(&config, embeddings).unwrap();
    let cross = exp.run_cross().unwrap().unwrap();
    let intra = exp.run_intra().unwrap();
    let took = start.elapsed();

    let cbir_map = cross.cell("src3", "priv8", "priv8", 16).unwrap().map;
    let cbir3_map = cross.cell("src3", "priv8", "src3", 16).unwrap().map;
    let softmax_map = cross.softmax_map("src3", "priv8").unwrap();
    let row = intra[0].rows.iter().find(|r| r.k == 16).unwrap();
    let cbir_auc = row.metrics.auc.unwrap().point;
    let softmax_auc = intra[0].softmax.auc.unwrap().point;
    verdict(
        cbir_map - softmax_map >= 0.10 && (cbir_auc - softmax_auc).abs() <= 0.05 && took < Duration::from_secs(60),
        format!(
            "k=16 mAP on 8-class test: CBIR(8-class pool) {cbir_map:.3} vs softmax {softmax_map:.3} \
             (CBIR 3-class pool {cbir3_map:.3}); intra AUC CBIR {cbir_auc:.3} vs softmax {softmax_auc:.3}; {took:.1?} (limit 60s)"
        ),
    )
}

fn similarity_case(spec: &SynthSpec) -> experiment::SimilarityReport {
    let (ds, _) = synth::generate(spec).unwrap();
    experiment::similarity_report(&spec.name, &ds, &ds, stats::ALPHA).unwrap()
}

fn similarity_separation() -> Verdict {
    let mut clusters = SynthSpec::gaussian("two", &["mel", "nevus"], 32, 1.0, 100, 40, 11);
    clusters.classes[0].mean = Some((0..32).map(|i| if i < 16 { 1.0 } else { 0.0 }).collect());
    clusters.classes[1].mean = Some((0..32).map(|i| if i < 16 { 0.0 } else { 1.0 }).collect());
    clusters.nonnegative = true;
    let sep = similarity_case(&clusters);

    let mut iso = SynthSpec::gaussian("iso", &["mel", "nevus"], 32, 1.0, 100, 40, 12);
    for c in iso.classes.iter_mut() {
        c.mean = Some(vec![0.0; 32]);
    }
    let null = similarity_case(&iso);

    let holm_p = |r: &experiment::SimilarityReport| -> Vec<f64> {
        r.per_class.iter().map(|t| t.p_holm.unwrap_or(f64::NAN)).collect()
    };
    let sep_ok = sep
        .per_class
        .iter()
        .all(|t| t.same_mean > t.different_mean && t.p_holm.is_some_and(|p| p < 0.001));
    let null_ok = null.per_class.iter().all(|t| t.p_holm.is_some_and(|p| p > 0.05));
    verdict(
        sep_ok && null_ok,
        format!(
            "two clusters: same {:.3} vs different {:.3}, Holm p {:?}; isotropic: same {:.3} vs different {:.3}, Holm p {:?}",
            sep.overall.same_mean,
            sep.overall.different_mean,
            holm_p(&sep),
            null.overall.same_mean,
            null.overall.different_mean,
            holm_p(&null)
        ),
    )
}

fn write_study(dir: &Path) -> std::path::PathBuf {
    let (config, embeddings) = synthetic_study(7);
    let data = dir.join("data");
    let mut toml = String::from("seed = 7\nreplicates = 500\nintra = [\"src3\"]\n\n[[dataset]]\nname = \"src3\"\nmalignant = [\"mel\"]\n\n");
    for e in &embeddings {
        let manifest = dataset::write_manifest(&e.data, &data).unwrap();
        let softmax = dataset::softmax_path(&manifest).unwrap();
        dataset::write_softmax(e.softmax.as_ref().unwrap(), &softmax).unwrap();
        toml.push_str(&format!(
            "[[embedding]]\nnetwork = \"{}\"\ndataset = \"{}\"\nmanifest = \"data/{}.manifest.csv\"\nsoftmax = \"data/{}.softmax.csv\"\n\n",
            e.network, e.dataset, e.data.name(), e.data.name()
        ));
    }
    let cross = config.cross.unwrap();
    let list = |v: &[String]| v.iter().map(|s| format!("{s:?}")).collect::<Vec<_>>().join(", ");
    toml.push_str(&format!(
        "[cross]\ntrain = [{}]\ntest = [{}]\ncbir = [{}]\n",
        list(&cross.train),
        list(&cross.test),
        list(&cross.cbir)
    ));
    let path = dir.join("grid.toml");
    fs::write(&path, toml).unwrap();
    path
}

fn run_grid(config: &Path, out: &Path, threads: usize) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_cbir-dx"))
        .args(["grid", "--k-sweep", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("CBIR_DX_THREADS", threads.to_string())
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&status.stderr).into_owned())
    }
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = write_study(dir.path());
    let (a, b) = (dir.path().join("one"), dir.path().join("four"));
    if let Err(e) = run_grid(&config, &a, 1).and_then(|()| run_grid(&config, &b, 4)) {
        return Verdict::Fail(format!("grid run failed: {e}"));
    }
    let mut differing = Vec::new();
    let mut bytes = 0;
    for name in experiment::REPORT_FILES {
        let (x, y) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        bytes += x.len();
        if x != y {
            differing.push(name);
        }
    }
    verdict(
        differing.is_empty(),
        format!(
            "{} report files ({bytes} bytes) compared between 1 and 4 worker threads; differing: {differing:?}",
            experiment::REPORT_FILES.len()
        ),
    )
}

fn performance() -> Verdict {
    const POOL: usize = 13_000;
    const DIM: usize = 2048;
    const QUERIES: usize = 1000;
    const K: usize = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let vectors: Vec<Vec<f32>> = (0..POOL + QUERIES)
        .map(|_| (0..DIM).map(|_| rng.random_range(0.0f32..1.0)).collect())
        .collect();
    let (pool, queries) = vectors.split_at(POOL);
    let index = synth::index_from_vectors(pool).unwrap();
    let q: Vec<Query<'_>> = queries.iter().map(|v| Query { id: "q", vector: v }).collect();

    let timed = |threads: usize| {
        let workers = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let start = Instant::now();
        let out = workers.install(|| index.batch_top_k(&q, K)).unwrap();
        (start.elapsed(), out)
    };
    let (single, out1) = timed(1);
    let single_ok = single < Duration::from_secs(30) && out1.len() == QUERIES;

    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let base =
        format!("{QUERIES} queries x {POOL} x d={DIM}, k={K}: single-threaded {single:.2?} (limit 30s)");
    if !single_ok {
        return Verdict::Fail(base);
    }
    if cpus < 4 {
        return Verdict::Blocked(format!(
            "{base}; 4-worker scaling (>= 3x) not measurable: host exposes {cpus} CPU(s)"
        ));
    }
    let (four, out4) = timed(4);
    let speedup = single.as_secs_f64() / four.as_secs_f64();
    verdict(
        speedup >= 3.0 && out4 == out1,
        format!("{base}; 4 workers {four:.2?}, speedup {speedup:.2}x (need >= 3x)"),
    )
}
