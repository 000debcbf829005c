//! ROC analysis, fixed-cutoff operating points, multiclass accuracy and
//! average precision.

use std::cmp::Ordering;

use serde::Serialize;

use crate::classify::ClassDistribution;
use crate::error::{Error, Result};

/// One point of the stepwise ROC curve. Decision rule: `score >= threshold`
/// is called positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Exact stepwise ROC curve with its area.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocAnalysis {
    /// Ascending thresholds: `-inf`, every distinct score, `+inf`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positive_count: usize,
    pub negative_count: usize,
}

/// Sensitivity and specificity (in percent) at a fixed cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub cutoff: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

fn check_binary(scores: &[f64], truth: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: truth.len(),
        });
    }
    if let Some(position) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            image_id: "score".into(),
            position,
        });
    }
    let p = truth.iter().filter(|&&t| t).count();
    Ok((p, truth.len() - p))
}

/// Cumulative (true positive, false positive) counts after each group of
/// equal scores, walking from the highest score down.
fn descending_steps(scores: &[f64], truth: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((s, tp, fp));
    }
    steps
}

/// Trapezoidal area from the step counts, accumulated exactly in integers:
/// twice the area times `P·N` is `Σ ΔFP·(TP_prev + TP)`.
fn trapezoid_auc(steps: &[(f64, usize, usize)], p: usize, n: usize) -> f64 {
    let mut twice_area: u128 = 0;
    let (mut tp_prev, mut fp_prev) = (0usize, 0usize);
    for &(_, tp, fp) in steps {
        twice_area += ((fp - fp_prev) as u128) * ((tp_prev + tp) as u128);
        tp_prev = tp;
        fp_prev = fp;
    }
    twice_area as f64 / (2.0 * p as f64 * n as f64)
}

/// ROC curve and AUC for binary `truth` (true = positive/malignant).
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Result<RocAnalysis> {
    let (p, n) = check_binary(scores, truth)?;
    if p == 0 || n == 0 {
        return Err(Error::SingleClassTruth);
    }
    let steps = descending_steps(scores, truth);
    let auc = trapezoid_auc(&steps, p, n);

    let point = |threshold: f64, tp: usize, fp: usize| RocPoint {
        threshold,
        sensitivity: tp as f64 / p as f64,
        specificity: (n - fp) as f64 / n as f64,
    };
    let mut points = Vec::with_capacity(steps.len() + 2);
    points.push(point(f64::NEG_INFINITY, p, n));
    points.extend(steps.iter().rev().map(|&(s, tp, fp)| point(s, tp, fp)));
    points.push(point(f64::INFINITY, 0, 0));
    Ok(RocAnalysis {
        points,
        auc,
        positive_count: p,
        negative_count: n,
    })
}

/// AUC only; `None` when either class is absent.
pub fn auc(scores: &[f64], truth: &[bool]) -> Result<Option<f64>> {
    let (p, n) = check_binary(scores, truth)?;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    Ok(Some(trapezoid_auc(&descending_steps(scores, truth), p, n)))
}

/// Sensitivity/specificity in percent, calling `score >= cutoff` positive.
pub fn operating_point(scores: &[f64], truth: &[bool], cutoff: f64) -> Result<OperatingPoint> {
    let (p, n) = check_binary(scores, truth)?;
    if p == 0 || n == 0 {
        return Err(Error::SingleClassTruth);
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s >= cutoff, t) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(OperatingPoint {
        cutoff,
        sensitivity: 100.0 * tp as f64 / p as f64,
        specificity: 100.0 * tn as f64 / n as f64,
    })
}

/// Fraction of exact matches.
pub fn multiclass_accuracy<A: AsRef<str>, B: AsRef<str>>(preds: &[A], truth: &[B]) -> Result<f64> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truth.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = preds
        .iter()
        .zip(truth)
        .filter(|(a, b)| a.as_ref() == b.as_ref())
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Step-interpolated average precision `Σ (R_n − R_{n−1})·P_n` over
/// descending distinct score thresholds; tied scores enter together.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Result<f64> {
    let (p, _) = check_binary(scores, truth)?;
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (_, tp, fp) in descending_steps(scores, truth) {
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanAveragePrecision {
    pub map: f64,
    /// One-vs-rest AP of each class present in the truth, in label-set order.
    pub per_class: Vec<(String, f64)>,
    /// Label-set classes with no positive in the truth, left out of the mean.
    pub skipped: Vec<String>,
}

/// Macro mean of one-vs-rest average precision over the classes present in
/// `truth`. A class missing from an image's distribution scores 0 there.
pub fn mean_average_precision<S: AsRef<str>>(
    dists: &[ClassDistribution],
    truth: &[S],
    label_set: &[String],
) -> Result<MeanAveragePrecision> {
    if dists.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: dists.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some((i, t)) = truth
        .iter()
        .enumerate()
        .find(|(_, t)| !label_set.iter().any(|l| l == t.as_ref()))
    {
        return Err(Error::UnknownLabel {
            image_id: format!("#{i}"),
            label: t.as_ref().to_string(),
        });
    }
    let mut per_class = Vec::new();
    let mut skipped = Vec::new();
    for class in label_set {
        let positives: Vec<bool> = truth.iter().map(|t| t.as_ref() == class).collect();
        if !positives.contains(&true) {
            skipped.push(class.clone());
            continue;
        }
        let scores: Vec<f64> = dists.iter().map(|d| d.score(class)).collect();
        per_class.push((class.clone(), average_precision(&scores, &positives)?));
    }
    let map = per_class.iter().map(|(_, ap)| ap).sum::<f64>() / per_class.len() as f64;
    Ok(MeanAveragePrecision {
        map,
        per_class,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::Provenance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn split(pos: &[f64], neg: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let scores = pos.iter().chain(neg).copied().collect();
        let truth = pos
            .iter()
            .map(|_| true)
            .chain(neg.iter().map(|_| false))
            .collect();
        (scores, truth)
    }

    #[test]
    fn auc_examples() {
        let (s, t) = split(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(roc_auc(&s, &t).unwrap().auc, 1.0);
        let (s, t) = split(&[0.5], &[0.5]);
        assert_eq!(roc_auc(&s, &t).unwrap().auc, 0.5);
        let (s, t) = split(&[0.8, 0.4], &[0.6, 0.2]);
        assert_eq!(roc_auc(&s, &t).unwrap().auc, 0.75);
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[true, true]),
            Err(Error::SingleClassTruth)
        ));
    }

    #[test]
    fn roc_points_are_monotone_with_sentinels() {
        let (s, t) = split(&[0.8, 0.4, 0.4], &[0.6, 0.2, 0.4]);
        let roc = roc_auc(&s, &t).unwrap();
        assert_eq!(roc.points.first().unwrap().threshold, f64::NEG_INFINITY);
        assert_eq!(roc.points.last().unwrap().threshold, f64::INFINITY);
        assert_eq!(roc.points.len(), 4 + 2);
        for w in roc.points.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[1].sensitivity <= w[0].sensitivity);
            assert!(w[1].specificity >= w[0].specificity);
        }
        assert_eq!(roc.positive_count, 3);
        assert_eq!(roc.negative_count, 3);
    }

    #[test]
    fn auc_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(4..200);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let mut truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            truth[0] = true;
            truth[1] = false;
            let a = roc_auc(&scores, &truth).unwrap().auc;
            let cubed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
            assert!((roc_auc(&cubed, &truth).unwrap().auc - a).abs() < 1e-12);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            assert!((roc_auc(&neg, &truth).unwrap().auc - (1.0 - a)).abs() < 1e-12);
        }
    }

    #[test]
    fn cbir_frequencies_bound_roc_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 8;
        let scores: Vec<f64> = (0..300)
            .map(|_| rng.random_range(0..=k) as f64 / k as f64)
            .collect();
        let truth: Vec<bool> = (0..300).map(|i| i % 3 == 0).collect();
        assert!(roc_auc(&scores, &truth).unwrap().points.len() <= k + 1 + 2);
    }

    #[test]
    fn operating_points() {
        let (s, t) = split(&[0.3, 0.2], &[0.25, 0.1]);
        let op = operating_point(&s, &t, 0.25).unwrap();
        assert_eq!((op.sensitivity, op.specificity), (50.0, 50.0));
        let op = operating_point(&s, &t, 0.0).unwrap();
        assert_eq!(op.sensitivity, 100.0);
        // 4 of 16 malignant neighbors sits exactly on the 25% cutoff
        let (s, t) = split(&[4.0 / 16.0], &[3.0 / 16.0]);
        let op = operating_point(&s, &t, 0.25).unwrap();
        assert_eq!((op.sensitivity, op.specificity), (100.0, 100.0));
    }

    #[test]
    fn accuracy() {
        assert_eq!(multiclass_accuracy(&["a", "b"], &["a", "b"]).unwrap(), 1.0);
        assert_eq!(multiclass_accuracy(&["a", "b"], &["b", "a"]).unwrap(), 0.0);
        assert_eq!(
            multiclass_accuracy(&["a", "b", "c", "d"], &["a", "b", "c", "a"]).unwrap(),
            0.75
        );
        assert!(matches!(
            multiclass_accuracy(&["a"], &["a", "b"]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
        assert!((ap - 0.833333).abs() < 1e-6);
        assert_eq!(
            average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap(),
            1.0
        );
        // one threshold: precision is prevalence
        let ap = average_precision(&[0.5; 7], &[true, false, true, false, false, false, true]).unwrap();
        assert!((ap - 3.0 / 7.0).abs() < 1e-15);
        assert!(matches!(
            average_precision(&[0.1], &[false]),
            Err(Error::NoPositives)
        ));
    }

    #[test]
    fn random_ranking_ap_near_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 2000;
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let prevalence = truth.iter().filter(|&&t| t).count() as f64 / n as f64;
        let ap = average_precision(&scores, &truth).unwrap();
        assert!((ap - prevalence).abs() < 0.05, "ap {ap} prevalence {prevalence}");
    }

    fn dist(pairs: &[(&str, f64)]) -> ClassDistribution {
        ClassDistribution {
            scores: pairs.iter().map(|(c, s)| (c.to_string(), *s)).collect(),
            provenance: Provenance::Softmax,
        }
    }

    #[test]
    fn map_examples() {
        let labels: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let dists = vec![dist(&[("a", 0.9)]), dist(&[("a", 0.8)])];
        let m = mean_average_precision(&dists, &["a", "a"], &labels).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.skipped, ["b", "c"]);

        let dists = vec![
            dist(&[("a", 0.9), ("b", 0.1)]),
            dist(&[("a", 0.2), ("b", 0.8)]),
            dist(&[("a", 0.7), ("b", 0.3)]),
        ];
        let m = mean_average_precision(&dists, &["a", "b", "a"], &labels).unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.per_class.len(), 2);

        assert!(matches!(
            mean_average_precision(&dists, &["a", "z", "a"], &labels),
            Err(Error::UnknownLabel { .. })
        ));
        assert!(matches!(
            mean_average_precision::<&str>(&[], &[], &labels),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn class_absent_from_scores_scores_prevalence() {
        let labels: Vec<String> = vec!["a".into(), "b".into()];
        let dists = vec![dist(&[("a", 1.0)]), dist(&[("a", 1.0)]), dist(&[("a", 1.0)])];
        let m = mean_average_precision(&dists, &["a", "b", "a"], &labels).unwrap();
        let b = m.per_class.iter().find(|(c, _)| c == "b").unwrap().1;
        assert!((b - 1.0 / 3.0).abs() < 1e-15);
    }
}
