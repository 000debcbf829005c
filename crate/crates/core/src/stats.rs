//! Inferential statistics: DeLong comparison of correlated AUCs, stratified
//! percentile bootstrap, paired t and Wilcoxon signed-rank tests, a
//! Jarque–Bera normality gate and Holm step-down adjustment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Two-sided significance level used throughout.
pub const ALPHA: f64 = 0.05;

/// Replicates used for confidence intervals unless configured otherwise.
pub const DEFAULT_REPLICATES: usize = 2000;

/// Exact Wilcoxon null distribution up to this many nonzero differences.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

/// Two-sided normal tail probability `2·(1 − Φ(|z|))`.
pub fn two_sided_normal_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AucComparison {
    pub auc_a: f64,
    pub auc_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub covariance: f64,
    pub z: f64,
    pub p_value: f64,
}

/// Placement values of one scored curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Placements {
    /// For each positive: fraction of negatives it outscores (ties count half).
    pub positive: Vec<f64>,
    /// For each negative: fraction of positives that outscore it.
    pub negative: Vec<f64>,
    pub auc: f64,
}

/// Average ranks (1-based) with ties sharing their mean rank, doubled so
/// they are exact integers.
fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, doubled
        let doubled = (i + 1 + j + 1) as u64;
        for &o in &order[i..=j] {
            ranks[o] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Placement values via midranks in O(n log n).
pub fn placements(scores: &[f64], truth: &[bool]) -> Result<Placements> {
    if scores.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: truth.len(),
        });
    }
    let pos: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(truth)
        .filter(|(_, &t)| !t)
        .map(|(&s, _)| s)
        .collect();
    let (m, n) = (pos.len(), neg.len());
    if m == 0 || n == 0 {
        return Err(Error::SingleClassTruth);
    }
    let combined: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    let r_all = doubled_midranks(&combined);
    let r_pos = doubled_midranks(&pos);
    let r_neg = doubled_midranks(&neg);

    // doubled (number of negatives below + half the ties) for each positive
    let pos_wins: Vec<u64> = (0..m).map(|i| r_all[i] - r_pos[i]).collect();
    let neg_losses: Vec<u64> = (0..n).map(|j| r_all[m + j] - r_neg[j]).collect();
    let total: u64 = pos_wins.iter().sum();
    Ok(Placements {
        positive: pos_wins.iter().map(|&w| w as f64 / (2.0 * n as f64)).collect(),
        negative: neg_losses
            .iter()
            .map(|&l| 1.0 - l as f64 / (2.0 * m as f64))
            .collect(),
        auc: total as f64 / (2.0 * m as f64 * n as f64),
    })
}

fn covariance(a: &[f64], mean_a: f64, b: &[f64], mean_b: f64) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - mean_a) * (y - mean_b)).sum();
    s / (a.len() - 1) as f64
}

/// Combines two curves' placement values into the DeLong z-test for the
/// difference of their AUCs.
pub fn delong_from_placements(a: &Placements, b: &Placements) -> Result<AucComparison> {
    let (m, n) = (a.positive.len() as f64, a.negative.len() as f64);
    let s10_aa = covariance(&a.positive, a.auc, &a.positive, a.auc);
    let s10_bb = covariance(&b.positive, b.auc, &b.positive, b.auc);
    let s10_ab = covariance(&a.positive, a.auc, &b.positive, b.auc);
    let s01_aa = covariance(&a.negative, a.auc, &a.negative, a.auc);
    let s01_bb = covariance(&b.negative, b.auc, &b.negative, b.auc);
    let s01_ab = covariance(&a.negative, a.auc, &b.negative, b.auc);

    let var_a = s10_aa / m + s01_aa / n;
    let var_b = s10_bb / m + s01_bb / n;
    let cov = s10_ab / m + s01_ab / n;
    let var_diff = var_a + var_b - 2.0 * cov;

    let (z, p_value) = if a.auc == b.auc {
        (0.0, 1.0)
    } else if var_diff <= 0.0 {
        return Err(Error::DegenerateVariance {
            auc_a: a.auc,
            auc_b: b.auc,
        });
    } else {
        let z = (a.auc - b.auc) / var_diff.sqrt();
        (z, two_sided_normal_p(z))
    };
    Ok(AucComparison {
        auc_a: a.auc,
        auc_b: b.auc,
        var_a,
        var_b,
        covariance: cov,
        z,
        p_value,
    })
}

/// DeLong test for two correlated ROC curves scored on the same cases.
pub fn delong_compare(scores_a: &[f64], scores_b: &[f64], truth: &[bool]) -> Result<AucComparison> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::LengthMismatch {
            left: scores_a.len(),
            right: scores_b.len(),
        });
    }
    let p = truth.iter().filter(|&&t| t).count();
    if p < 2 || truth.len() - p < 2 {
        return Err(Error::TooFewCases {
            what: "DeLong comparison",
            needed: 2,
        });
    }
    let a = placements(scores_a, truth)?;
    let b = placements(scores_b, truth)?;
    delong_from_placements(&a, &b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            seed: 0,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConfidenceInterval {
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub replicates: usize,
    pub level: f64,
}

/// Redraw attempts per replicate before giving up on an undefined metric.
const MAX_ATTEMPTS: usize = 10;

/// Percentile of sorted data with linear interpolation between order
/// statistics (Hyndman–Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Stratified percentile bootstrap.
///
/// `metric` receives a resample as a list of case indices and returns `None`
/// when the metric is undefined on it; such replicates are redrawn. Positive
/// and negative strata are resampled separately with replacement at their
/// original sizes. Replicate `r` draws from its own ChaCha stream `r` under
/// `config.seed`, so the result does not depend on thread scheduling.
pub fn bootstrap_ci<F>(
    metric: F,
    positives: &[usize],
    negatives: &[usize],
    config: &BootstrapConfig,
) -> Result<ConfidenceInterval>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyStratum);
    }
    if config.replicates == 0 || !(0.0 < config.level && config.level < 1.0) {
        return Err(Error::Config(format!(
            "bootstrap needs replicates >= 1 and level in (0,1), got {} and {}",
            config.replicates, config.level
        )));
    }
    let all: Vec<usize> = positives.iter().chain(negatives).copied().collect();
    let point = metric(&all).ok_or(Error::UndefinedMetric)?;

    let mut values = (0..config.replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            let mut sample = Vec::with_capacity(all.len());
            for _ in 0..MAX_ATTEMPTS {
                sample.clear();
                sample.extend((0..positives.len()).map(|_| positives[rng.random_range(0..positives.len())]));
                sample.extend((0..negatives.len()).map(|_| negatives[rng.random_range(0..negatives.len())]));
                if let Some(v) = metric(&sample) {
                    return Ok(v);
                }
            }
            Err(Error::BootstrapUndefined {
                replicate: r,
                attempts: MAX_ATTEMPTS,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    values.sort_unstable_by(f64::total_cmp);
    let tail = (1.0 - config.level) / 2.0;
    Ok(ConfidenceInterval {
        point,
        low: quantile_sorted(&values, tail),
        high: quantile_sorted(&values, 1.0 - tail),
        replicates: config.replicates,
        level: config.level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PairedTest {
    T,
    Wilcoxon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedTestResult {
    pub test: PairedTest,
    /// t statistic, or the signed-rank sum of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Differences used (nonzero ones for Wilcoxon).
    pub n: usize,
    /// Whether a Wilcoxon p-value came from the exact null distribution.
    pub exact: bool,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One-sample t-test of paired differences against zero, two-sided.
pub fn paired_t(diffs: &[f64]) -> Result<PairedTestResult> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::TooFewCases {
            what: "paired t-test",
            needed: 2,
        });
    }
    // the mean of equal values can round away from them, so test equality directly
    if diffs.iter().all(|&d| d == diffs[0]) {
        return Err(Error::ZeroVariance);
    }
    let m = mean(diffs);
    let sd = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1) as f64).sqrt();
    if sd == 0.0 || !sd.is_finite() {
        return Err(Error::ZeroVariance);
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Config(e.to_string()))?;
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(PairedTestResult {
        test: PairedTest::T,
        statistic: t,
        p_value,
        n,
        exact: false,
    })
}

/// Nonzero differences and their doubled midranks of `|d|`.
fn signed_ranks(diffs: &[f64]) -> (Vec<f64>, Vec<u64>) {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let abs: Vec<f64> = nonzero.iter().map(|d| d.abs()).collect();
    let ranks = doubled_midranks(&abs);
    (nonzero, ranks)
}

/// Two-sided p from counts of sign patterns at or below / at or above the
/// observed statistic out of `2^n`.
pub(crate) fn two_sided_from_counts(at_or_below: u64, at_or_above: u64, n: usize) -> f64 {
    let tail = at_or_below.min(at_or_above) as f64;
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}

/// Wilcoxon signed-rank test of paired differences, two-sided.
///
/// Zeros are dropped and tied magnitudes share average ranks. Up to
/// [`WILCOXON_EXACT_MAX_N`] differences the null distribution of the
/// positive-rank sum is computed exactly (tied ranks included); beyond that
/// a normal approximation with tie and continuity corrections is used.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<PairedTestResult> {
    let (nonzero, ranks) = signed_ranks(diffs);
    let n = nonzero.len();
    if n == 0 {
        return Err(Error::AllZeroDifferences);
    }
    let w2: u64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let statistic = w2 as f64 / 2.0;

    if n <= WILCOXON_EXACT_MAX_N {
        // counts[s]: sign patterns whose doubled positive-rank sum is s
        let total: u64 = ranks.iter().sum();
        let mut counts = vec![0u64; total as usize + 1];
        counts[0] = 1;
        let mut reach = 0usize;
        for &r in &ranks {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let below: u64 = counts[..=w2 as usize].iter().sum();
        let above: u64 = counts[w2 as usize..].iter().sum();
        return Ok(PairedTestResult {
            test: PairedTest::Wilcoxon,
            statistic,
            p_value: two_sided_from_counts(below, above, n),
            n,
            exact: true,
        });
    }

    let nf = n as f64;
    let mu = nf * (nf + 1.0) / 4.0;
    let mut tie_term = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    for group in sorted.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((statistic - mu).abs() - 0.5).max(0.0) / var.sqrt();
    Ok(PairedTestResult {
        test: PairedTest::Wilcoxon,
        statistic,
        p_value: two_sided_normal_p(z),
        n,
        exact: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormalityDecision {
    pub test: PairedTest,
    pub jarque_bera: Option<f64>,
    pub p_value: Option<f64>,
    pub warning: Option<String>,
}

/// Minimum sample size for the normality check.
pub const NORMALITY_MIN_N: usize = 8;

/// Chooses between the paired t-test and Wilcoxon with a Jarque–Bera test
/// (`JB = n/6·(S² + K²/4)` against χ²(2)) at [`ALPHA`].
pub fn normality_gate(diffs: &[f64]) -> NormalityDecision {
    let n = diffs.len();
    if n < NORMALITY_MIN_N {
        return NormalityDecision {
            test: PairedTest::Wilcoxon,
            jarque_bera: None,
            p_value: None,
            warning: Some(format!(
                "only {n} differences (< {NORMALITY_MIN_N}); normality not checked, using Wilcoxon"
            )),
        };
    }
    let m = mean(diffs);
    let central = |p: i32| diffs.iter().map(|d| (d - m).powi(p)).sum::<f64>() / n as f64;
    let (m2, m3, m4) = (central(2), central(3), central(4));
    if m2 == 0.0 {
        return NormalityDecision {
            test: PairedTest::Wilcoxon,
            jarque_bera: None,
            p_value: None,
            warning: Some("differences have zero variance; using Wilcoxon".into()),
        };
    }
    let skew = m3 / m2.powf(1.5);
    let excess_kurtosis = m4 / (m2 * m2) - 3.0;
    let jb = n as f64 / 6.0 * (skew * skew + excess_kurtosis * excess_kurtosis / 4.0);
    // χ²(2) survival function
    let p = (-jb / 2.0).exp();
    NormalityDecision {
        test: if p < ALPHA {
            PairedTest::Wilcoxon
        } else {
            PairedTest::T
        },
        jarque_bera: Some(jb),
        p_value: Some(p),
        warning: None,
    }
}

/// Runs whichever paired test the normality gate picks.
pub fn paired_test(diffs: &[f64]) -> Result<(NormalityDecision, PairedTestResult)> {
    let gate = normality_gate(diffs);
    let result = match gate.test {
        PairedTest::T => paired_t(diffs)?,
        PairedTest::Wilcoxon => wilcoxon_signed_rank(diffs)?,
    };
    Ok((gate, result))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolmAdjustment {
    /// Adjusted p-values in input order.
    pub adjusted: Vec<f64>,
    /// False for comparisons after the first non-rejection (in ascending
    /// p order), which the sequential procedure never reaches.
    pub evaluated: Vec<bool>,
}

/// Holm step-down adjustment with the stop-after-first-non-rejection flags
/// at significance level `alpha`.
pub fn holm_adjust(p: &[f64], alpha: f64) -> Result<HolmAdjustment> {
    if let Some(&bad) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::PValueOutOfRange(bad));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));

    let mut adjusted = vec![0.0; m];
    let mut evaluated = vec![false; m];
    let mut running = 0.0f64;
    let mut stopped = false;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * p[i]).min(1.0));
        adjusted[i] = running;
        evaluated[i] = !stopped;
        if running >= alpha {
            stopped = true;
        }
    }
    Ok(HolmAdjustment { adjusted, evaluated })
}

/// Table-style p-value rendering: three decimals, floored at `<0.001`.
pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "<0.001".to_string()
    } else {
        format!("{p:.3}")
    }
}
