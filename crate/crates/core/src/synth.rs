//! Synthetic embeddings and brute-force reference implementations.
//!
//! The generator draws Gaussian clusters around per-class means and pairs
//! them with a "softmax" table equal to the true class posterior under the
//! generative model, so classifier quality is controlled by `sigma` (and
//! `softmax_temperature`). The oracles compute each metric straight from its
//! definition with no shared code path, and [`self_check`] runs them against
//! the fast implementations on seeded random instances.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::classify::ClassDistribution;
use crate::dataset::{Dataset, EmbeddingRecord, SoftmaxTable, Split};
use crate::error::{Error, Result};
use crate::index::{IndexEntry, NormalizedIndex, Query};
use crate::{metrics, stats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    /// Explicit cluster center; drawn at random (scale `mean_scale`) when absent.
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
}

/// Recipe for a synthetic dataset. Deserializable from TOML:
///
/// ```toml
/// name = "toy"
/// dim = 32
/// sigma = 0.5
/// seed = 7
/// train_per_class = 40
/// valid_per_class = 0
/// test_per_class = 10
/// nonnegative = true
/// classes = [{ name = "mel" }, { name = "nevus" }, { name = "bkl" }]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    pub classes: Vec<SynthClass>,
    pub train_per_class: usize,
    #[serde(default)]
    pub valid_per_class: usize,
    pub test_per_class: usize,
    /// Clamp every coordinate at zero, like post-ReLU features.
    #[serde(default)]
    pub nonnegative: bool,
    #[serde(default = "one")]
    pub mean_scale: f64,
    /// Classes the synthetic classifier knows; all classes when absent.
    #[serde(default)]
    pub softmax_classes: Option<Vec<String>>,
    #[serde(default = "one")]
    pub softmax_temperature: f64,
}

fn one() -> f64 {
    1.0
}

impl SynthSpec {
    /// Random-mean Gaussian clusters with default options.
    pub fn gaussian(
        name: &str,
        classes: &[&str],
        dim: usize,
        sigma: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Self {
        SynthSpec {
            name: name.into(),
            dim,
            sigma,
            seed,
            classes: classes
                .iter()
                .map(|c| SynthClass {
                    name: c.to_string(),
                    mean: None,
                })
                .collect(),
            train_per_class,
            valid_per_class: 0,
            test_per_class,
            nonnegative: false,
            mean_scale: 1.0,
            softmax_classes: None,
            softmax_temperature: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return fail(format!("dim must be at least 2, got {}", self.dim));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.softmax_temperature > 0.0) {
            return fail("softmax_temperature must be positive".into());
        }
        if self.classes.is_empty() {
            return fail("at least one class is required".into());
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return fail("class names must be unique".into());
        }
        for c in &self.classes {
            if let Some(m) = &c.mean {
                if m.len() != self.dim || m.iter().any(|x| !x.is_finite()) {
                    return fail(format!(
                        "mean of class {:?} must be {} finite values",
                        c.name, self.dim
                    ));
                }
            }
        }
        if let Some(known) = &self.softmax_classes {
            if known.is_empty() || known.iter().any(|k| !names.contains(&k.as_str())) {
                return fail("softmax_classes must be a non-empty subset of the classes".into());
            }
        }
        Ok(())
    }

    /// Class centers in declaration order, drawing any missing ones from the
    /// seed.
    pub fn resolved_means(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let normal = Normal::new(0.0, self.mean_scale).unwrap_or(Normal::new(0.0, 1.0).unwrap());
        self.classes
            .iter()
            .map(|c| match &c.mean {
                Some(m) => m.clone(),
                None => (0..self.dim).map(|_| normal.sample(&mut rng)).collect(),
            })
            .collect()
    }
}

/// Draws a dataset and its posterior softmax table from `spec`.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, SoftmaxTable)> {
    spec.validate()?;
    let means = spec.resolved_means();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut records = Vec::new();
    let plan = [
        (Split::Train, spec.train_per_class),
        (Split::Valid, spec.valid_per_class),
        (Split::Test, spec.test_per_class),
    ];
    for (split, count) in plan {
        for (class, mean) in spec.classes.iter().zip(&means) {
            for i in 0..count {
                let vector = draw(&mut rng, mean, spec.sigma, spec.nonnegative);
                let image_id = format!("{}-{}-{}-{i}", spec.name, split, class.name);
                records.push(EmbeddingRecord {
                    lesion_id: format!("lesion-{image_id}"),
                    image_id,
                    label: class.name.clone(),
                    split,
                    has_pathology: true,
                    vector,
                });
            }
        }
    }

    let label_set: Vec<String> = spec.classes.iter().map(|c| c.name.clone()).collect();
    let known: Vec<String> = spec.softmax_classes.clone().unwrap_or_else(|| label_set.clone());
    let known_means: Vec<&Vec<f64>> = known
        .iter()
        .map(|k| &means[label_set.iter().position(|l| l == k).unwrap_or(0)])
        .collect();

    let mut rows = BTreeMap::new();
    for r in &records {
        rows.insert(
            r.image_id.clone(),
            posterior(&r.vector, &known_means, spec.sigma, spec.softmax_temperature),
        );
    }
    let mut ds = Dataset::with_label_set(spec.name.clone(), spec.dim, label_set, records)?;
    ds.set_metadata("source", "synthetic");
    let table = SoftmaxTable::new(known, rows)?;
    Ok((ds, table))
}

fn draw(rng: &mut ChaCha8Rng, mean: &[f64], sigma: f64, nonnegative: bool) -> Vec<f32> {
    loop {
        let v: Vec<f32> = mean
            .iter()
            .map(|&m| {
                let z: f64 = StandardNormal.sample(rng);
                let x = m + sigma * z;
                (if nonnegative { x.max(0.0) } else { x }) as f32
            })
            .collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

/// `P(class | x)` for isotropic Gaussian classes with equal priors, over the
/// given class centers.
pub fn posterior(x: &[f32], means: &[&Vec<f64>], sigma: f64, temperature: f64) -> Vec<f64> {
    let logits: Vec<f64> = means
        .iter()
        .map(|m| {
            let d2: f64 = x
                .iter()
                .zip(m.iter())
                .map(|(&xi, &mi)| (f64::from(xi) - mi).powi(2))
                .sum();
            -d2 / (2.0 * sigma * sigma) / temperature
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

// ---------------------------------------------------------------------------
// Oracles

pub const TOP_K_CAP: usize = 2000;
pub const PAIRWISE_CAP: usize = 500;
pub const WILCOXON_ENUM_CAP: usize = 12;

fn cap(what: &'static str, size: usize, cap: usize) -> Result<()> {
    if size > cap {
        Err(Error::OracleTooLarge { what, size, cap })
    } else {
        Ok(())
    }
}

/// Full-sort top-k: cosine of the query to every vector from the textbook
/// formula, then a complete sort by (similarity desc, position asc).
pub fn brute_top_k(pool: &[Vec<f32>], query: &[f32], k: usize) -> Result<Vec<(usize, f64)>> {
    cap("top-k pool", pool.len(), TOP_K_CAP)?;
    let mut scored = pool
        .iter()
        .enumerate()
        .map(|(i, v)| Ok((i, crate::index::cosine(query, v)?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored)
}

/// AUC by counting every (positive, negative) pair; ties count half.
pub fn brute_auc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    cap("AUC sample", scores.len(), PAIRWISE_CAP)?;
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !truth[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if truth[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                twice_wins += 2;
            } else if si == sj {
                twice_wins += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::SingleClassTruth);
    }
    Ok(twice_wins as f64 / (2.0 * pairs as f64))
}

/// Average precision by recounting precision and recall from scratch at
/// every distinct threshold, highest first.
pub fn brute_ap(scores: &[f64], truth: &[bool]) -> Result<f64> {
    cap("AP sample", scores.len(), PAIRWISE_CAP)?;
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let tp = scores.iter().zip(truth).filter(|(&s, &y)| s >= t && y).count();
        let called = scores.iter().filter(|&&s| s >= t).count();
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / called as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Macro mAP over classes present in `truth`, via [`brute_ap`].
pub fn brute_map(dists: &[ClassDistribution], truth: &[&str], label_set: &[String]) -> Result<f64> {
    let mut aps = Vec::new();
    for class in label_set {
        let y: Vec<bool> = truth.iter().map(|t| t == class).collect();
        if !y.contains(&true) {
            continue;
        }
        let s: Vec<f64> = dists.iter().map(|d| d.score(class)).collect();
        aps.push(brute_ap(&s, &y)?);
    }
    if aps.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Exact two-sided Wilcoxon signed-rank p-value by enumerating all `2^n`
/// sign assignments of the nonzero differences' (mid)ranks.
pub fn brute_wilcoxon_exact(diffs: &[f64]) -> Result<f64> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nonzero.len();
    cap("Wilcoxon enumeration", n, WILCOXON_ENUM_CAP)?;
    if n == 0 {
        return Err(Error::AllZeroDifferences);
    }
    // doubled midrank: 2·#smaller + #equal(incl. self) + 1
    let doubled: Vec<u64> = nonzero
        .iter()
        .map(|d| {
            let a = d.abs();
            let less = nonzero.iter().filter(|x| x.abs() < a).count() as u64;
            let equal = nonzero.iter().filter(|x| x.abs() == a).count() as u64;
            2 * less + equal + 1
        })
        .collect();
    let observed: u64 = nonzero
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let (mut below, mut above) = (0u64, 0u64);
    for mask in 0u32..(1 << n) {
        let w: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| doubled[i]).sum();
        if w <= observed {
            below += 1;
        }
        if w >= observed {
            above += 1;
        }
    }
    Ok(stats::two_sided_from_counts(below, above, n))
}

/// DeLong comparison with placement values counted pair by pair.
pub fn brute_delong(a: &[f64], b: &[f64], truth: &[bool]) -> Result<stats::AucComparison> {
    cap("DeLong sample", truth.len(), PAIRWISE_CAP)?;
    let psi = |x: f64, y: f64| {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let pos: Vec<usize> = (0..truth.len()).filter(|&i| truth[i]).collect();
    let neg: Vec<usize> = (0..truth.len()).filter(|&i| !truth[i]).collect();
    let (m, n) = (pos.len(), neg.len());
    if m < 2 || n < 2 {
        return Err(Error::TooFewCases {
            what: "DeLong comparison",
            needed: 2,
        });
    }
    let curve = |s: &[f64]| {
        let v10: Vec<f64> = pos
            .iter()
            .map(|&i| neg.iter().map(|&j| psi(s[i], s[j])).sum::<f64>() / n as f64)
            .collect();
        let v01: Vec<f64> = neg
            .iter()
            .map(|&j| pos.iter().map(|&i| psi(s[i], s[j])).sum::<f64>() / m as f64)
            .collect();
        let auc = v10.iter().sum::<f64>() / m as f64;
        (v10, v01, auc)
    };
    let (a10, a01, auc_a) = curve(a);
    let (b10, b01, auc_b) = curve(b);
    let cov = |x: &[f64], mx: f64, y: &[f64], my: f64| {
        x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / (x.len() - 1) as f64
    };
    let var_a = cov(&a10, auc_a, &a10, auc_a) / m as f64 + cov(&a01, auc_a, &a01, auc_a) / n as f64;
    let var_b = cov(&b10, auc_b, &b10, auc_b) / m as f64 + cov(&b01, auc_b, &b01, auc_b) / n as f64;
    let covariance = cov(&a10, auc_a, &b10, auc_b) / m as f64 + cov(&a01, auc_a, &b01, auc_b) / n as f64;
    let var = var_a + var_b - 2.0 * covariance;
    let (z, p_value) = if auc_a == auc_b {
        (0.0, 1.0)
    } else if var <= 0.0 {
        return Err(Error::DegenerateVariance { auc_a, auc_b });
    } else {
        let z = (auc_a - auc_b) / var.sqrt();
        (z, stats::two_sided_normal_p(z))
    };
    Ok(stats::AucComparison {
        auc_a,
        auc_b,
        var_a,
        var_b,
        covariance,
        z,
        p_value,
    })
}

// ---------------------------------------------------------------------------
// Random instances shared by the self-check and the test suites

/// Random retrieval instance: pool vectors (with exact and power-of-two
/// scaled duplicates so ties occur) and a query.
pub fn random_retrieval_instance(
    rng: &mut impl Rng,
    max_pool: usize,
    max_dim: usize,
) -> (Vec<Vec<f32>>, Vec<f32>, usize) {
    let n = rng.random_range(1..=max_pool);
    let d = rng.random_range(2..=max_dim);
    let mut pool: Vec<Vec<f32>> = Vec::with_capacity(n);
    for _ in 0..n {
        if !pool.is_empty() && rng.random_bool(0.05) {
            let src = pool[rng.random_range(0..pool.len())].clone();
            let scale = [1.0f32, 2.0, 0.5, 4.0][rng.random_range(0..4)];
            pool.push(src.iter().map(|x| x * scale).collect());
        } else {
            pool.push(nonzero_vector(rng, d));
        }
    }
    let query = if rng.random_bool(0.2) {
        pool[rng.random_range(0..n)].clone()
    } else {
        nonzero_vector(rng, d)
    };
    let k = rng.random_range(1..=n.min(64));
    (pool, query, k)
}

/// Uniform vector in `[-1, 1)^d` that is not all zeros.
pub fn nonzero_vector(rng: &mut impl Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        if v.iter().any(|&x| x != 0.0) {
            return v;
        }
    }
}

/// Random binary-scored instance with both classes present; scores are
/// coarsely quantized so ties are common.
pub fn random_scored_instance(
    rng: &mut impl Rng,
    max_n: usize,
    min_per_class: usize,
) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2 * min_per_class..=max_n.max(2 * min_per_class));
    let levels = rng.random_range(2..=50u32);
    let prevalence = rng.random_range(0.1..0.9);
    let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(prevalence)).collect();
    for i in 0..min_per_class {
        truth[i] = true;
        truth[n - 1 - i] = false;
    }
    let scores = truth
        .iter()
        .map(|&t| {
            let shift = if t { rng.random_range(0..levels / 2 + 1) } else { 0 };
            f64::from((rng.random_range(0..levels) + shift).min(levels)) / f64::from(levels)
        })
        .collect();
    (scores, truth)
}

/// Random paired differences with ties and zeros.
pub fn random_diffs(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let d: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.random_range(-6i32..=6)) * 0.5)
            .collect();
        if d.iter().any(|&x| x != 0.0) {
            return d;
        }
    }
}

pub fn index_from_vectors(pool: &[Vec<f32>]) -> Result<NormalizedIndex> {
    let ids: Vec<String> = (0..pool.len()).map(|i| i.to_string()).collect();
    NormalizedIndex::from_entries(pool.iter().zip(&ids).map(|(v, id)| IndexEntry {
        image_id: id,
        lesion_id: id,
        label: "x",
        vector: v,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

fn run_check(
    name: &'static str,
    instances: usize,
    mut one: impl FnMut(usize) -> Result<Option<String>>,
) -> Result<CheckOutcome> {
    let mut out = CheckOutcome {
        name,
        instances,
        failures: 0,
        first_failure: None,
    };
    for i in 0..instances {
        if let Some(msg) = one(i)? {
            out.failures += 1;
            out.first_failure.get_or_insert(format!("instance {i}: {msg}"));
        }
    }
    Ok(out)
}

/// Fast paths versus oracles on `instances` seeded random instances each.
pub fn self_check(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut outcomes = Vec::new();

    outcomes.push(run_check("top-k vs full sort", instances, |_| {
        let (pool, query, k) = random_retrieval_instance(&mut rng, 400, 64);
        let index = index_from_vectors(&pool)?;
        let fast: Vec<usize> = index
            .top_k(
                Query {
                    id: "q",
                    vector: &query,
                },
                k,
            )?
            .neighbors
            .iter()
            .map(|n| n.position)
            .collect();
        let slow: Vec<usize> = brute_top_k(&pool, &query, k)?.into_iter().map(|p| p.0).collect();
        Ok((fast != slow).then(|| format!("{fast:?} != {slow:?}")))
    })?);

    outcomes.push(run_check("AUC vs pair counting", instances, |_| {
        let (s, t) = random_scored_instance(&mut rng, PAIRWISE_CAP, 1);
        let fast = metrics::roc_auc(&s, &t)?.auc;
        let slow = brute_auc(&s, &t)?;
        Ok(((fast - slow).abs() > 1e-12).then(|| format!("{fast} vs {slow}")))
    })?);

    outcomes.push(run_check("AP vs threshold recount", instances, |_| {
        let (s, t) = random_scored_instance(&mut rng, PAIRWISE_CAP, 1);
        let fast = metrics::average_precision(&s, &t)?;
        let slow = brute_ap(&s, &t)?;
        Ok(((fast - slow).abs() > 1e-12).then(|| format!("{fast} vs {slow}")))
    })?);

    outcomes.push(run_check("DeLong vs pairwise placements", instances, |_| {
        let (a, t) = random_scored_instance(&mut rng, 200, 2);
        let b: Vec<f64> = a
            .iter()
            .map(|x| {
                if rng.random_bool(0.5) {
                    *x
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
            .collect();
        let fast = stats::delong_compare(&a, &b, &t);
        let slow = brute_delong(&a, &b, &t);
        Ok(match (fast, slow) {
            (Ok(f), Ok(s)) => {
                let close = (f.auc_a - s.auc_a).abs() <= 1e-12
                    && (f.auc_b - s.auc_b).abs() <= 1e-12
                    && (f.z - s.z).abs() <= 1e-9 * s.z.abs().max(1.0)
                    && (f.p_value - s.p_value).abs() <= 1e-9;
                (!close).then(|| format!("{f:?} vs {s:?}"))
            }
            (Err(Error::DegenerateVariance { .. }), Err(Error::DegenerateVariance { .. })) => None,
            (f, s) => Some(format!("{f:?} vs {s:?}")),
        })
    })?);

    outcomes.push(run_check("Wilcoxon exact vs enumeration", instances, |_| {
        let n = rng.random_range(1..=10);
        let d = random_diffs(&mut rng, n);
        let fast = stats::wilcoxon_signed_rank(&d)?.p_value;
        let slow = brute_wilcoxon_exact(&d)?;
        Ok((fast != slow).then(|| format!("{d:?}: {fast} vs {slow}")))
    })?);

    Ok(outcomes)
}
