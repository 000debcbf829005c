//! Class scores from retrieval results and softmax rows.
//!
//! Retrieval-based probabilities are plain neighbor-label frequencies. The
//! only place rank matters is top-1 prediction, where each neighbor carries
//! a weight falling linearly from 1.00 (most similar) to 0.99 (k-th) so that
//! equal counts resolve toward the class retrieved earlier.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::index::RetrievalResult;

/// Resolves a pool image id to its diagnosis label.
pub trait LabelLookup {
    fn label_of(&self, image_id: &str) -> Option<&str>;
}

impl LabelLookup for HashMap<String, String> {
    fn label_of(&self, image_id: &str) -> Option<&str> {
        self.get(image_id).map(String::as_str)
    }
}

impl LabelLookup for BTreeMap<String, String> {
    fn label_of(&self, image_id: &str) -> Option<&str> {
        self.get(image_id).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Cbir { k: usize },
    Softmax,
}

/// Per-class scores for one image. Classes missing from the map score 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    pub scores: BTreeMap<String, f64>,
    pub provenance: Provenance,
}

impl ClassDistribution {
    pub fn score(&self, class: &str) -> f64 {
        self.scores.get(class).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.scores.values().sum()
    }
}

/// Diagnoses counted as cancer when binarizing for ROC analysis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalignantSet(BTreeSet<String>);

/// Labels treated as malignant unless configured otherwise.
pub const DEFAULT_MALIGNANT: [&str; 3] = ["bcc", "mel", "scc"];

impl MalignantSet {
    pub fn new<I, S>(classes: I, label_set: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = classes.into_iter().map(Into::into).collect();
        if set.is_empty() {
            return Err(Error::InvalidMalignantSet("empty".into()));
        }
        if let Some(c) = set.iter().find(|c| !label_set.contains(c)) {
            return Err(Error::InvalidMalignantSet(format!(
                "{c:?} is not one of {label_set:?}"
            )));
        }
        Ok(MalignantSet(set))
    }

    /// The default malignant labels ({mel, bcc, scc}) that occur in
    /// `label_set`.
    pub fn default_for(label_set: &[String]) -> Result<Self> {
        Self::new(
            DEFAULT_MALIGNANT
                .iter()
                .filter(|c| label_set.iter().any(|l| l == *c))
                .copied(),
            label_set,
        )
    }

    pub fn contains(&self, class: &str) -> bool {
        self.0.contains(class)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }
}

fn neighbor_labels<'a>(r: &RetrievalResult, labels: &'a impl LabelLookup) -> Result<Vec<&'a str>> {
    r.neighbors
        .iter()
        .map(|n| {
            labels
                .label_of(&n.image_id)
                .ok_or_else(|| Error::UnresolvableNeighbor(n.image_id.clone()))
        })
        .collect()
}

/// Label frequencies among the retrieved neighbors.
pub fn cbir_distribution(r: &RetrievalResult, labels: &impl LabelLookup) -> Result<ClassDistribution> {
    let k = r.k();
    if k == 0 {
        return Err(Error::ZeroK);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for label in neighbor_labels(r, labels)? {
        *counts.entry(label.to_string()).or_default() += 1;
    }
    Ok(ClassDistribution {
        scores: counts
            .into_iter()
            .map(|(c, n)| (c, n as f64 / k as f64))
            .collect(),
        provenance: Provenance::Cbir { k },
    })
}

/// Weight of the neighbor at 0-based `rank` among `k`:
/// `1.00 − 0.01·rank/(k−1)`, or 1.00 when `k = 1`.
pub fn rank_weight(rank: usize, k: usize) -> f64 {
    if k <= 1 {
        1.0
    } else {
        1.0 - 0.01 * rank as f64 / (k - 1) as f64
    }
}

/// Rank weight scaled by `100·(k−1)` so sums compare exactly as integers.
fn scaled_rank_weight(rank: usize, k: usize) -> u64 {
    if k <= 1 {
        1
    } else {
        (100 * (k - 1) - rank) as u64
    }
}

/// Rank-weighted vote over neighbor labels in retrieval order. Exact ties in
/// weighted votes go to the lexicographically smallest class.
pub fn weighted_vote<S: AsRef<str>>(ranked_labels: &[S]) -> Option<&str> {
    let k = ranked_labels.len();
    let mut votes: BTreeMap<&str, u64> = BTreeMap::new();
    for (rank, label) in ranked_labels.iter().enumerate() {
        *votes.entry(label.as_ref()).or_default() += scaled_rank_weight(rank, k);
    }
    // BTreeMap iterates lexicographically; keep the first maximum
    let mut best: Option<(&str, u64)> = None;
    for (class, v) in votes {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((class, v));
        }
    }
    best.map(|(c, _)| c)
}

/// Top-1 diagnosis from a retrieval result.
pub fn cbir_top1(r: &RetrievalResult, labels: &impl LabelLookup) -> Result<String> {
    let ranked = neighbor_labels(r, labels)?;
    weighted_vote(&ranked).map(str::to_string).ok_or(Error::ZeroK)
}

/// Fraction of the neighbors whose label is malignant (all neighbors weigh
/// the same).
pub fn cbir_malignancy(
    r: &RetrievalResult,
    labels: &impl LabelLookup,
    malignant: &MalignantSet,
) -> Result<f64> {
    let k = r.k();
    if k == 0 {
        return Err(Error::ZeroK);
    }
    let hits = neighbor_labels(r, labels)?
        .into_iter()
        .filter(|l| malignant.contains(l))
        .count();
    Ok(hits as f64 / k as f64)
}

/// Argmax class of a softmax row; exact ties go to the lexicographically
/// smallest class name.
pub fn softmax_top1<'a>(row: &[f64], classes: &'a [String]) -> Result<&'a str> {
    if row.len() != classes.len() {
        return Err(Error::LengthMismatch {
            left: row.len(),
            right: classes.len(),
        });
    }
    let mut best: Option<(&str, f64)> = None;
    for (class, &p) in classes.iter().zip(row) {
        let better = match best {
            None => true,
            Some((b, bp)) => p > bp || (p == bp && class.as_str() < b),
        };
        if better {
            best = Some((class, p));
        }
    }
    best.map(|(c, _)| c).ok_or(Error::EmptyInput)
}

/// Summed probability of the malignant classes.
pub fn softmax_malignancy(row: &[f64], classes: &[String], malignant: &MalignantSet) -> Result<f64> {
    if row.len() != classes.len() {
        return Err(Error::LengthMismatch {
            left: row.len(),
            right: classes.len(),
        });
    }
    Ok(classes
        .iter()
        .zip(row)
        .filter(|(c, _)| malignant.contains(c))
        .map(|(_, p)| p)
        .sum())
}

pub fn softmax_distribution(row: &[f64], classes: &[String]) -> Result<ClassDistribution> {
    if row.len() != classes.len() {
        return Err(Error::LengthMismatch {
            left: row.len(),
            right: classes.len(),
        });
    }
    Ok(ClassDistribution {
        scores: classes.iter().cloned().zip(row.iter().copied()).collect(),
        provenance: Provenance::Softmax,
    })
}
