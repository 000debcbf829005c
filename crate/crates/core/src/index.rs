//! Exact top-k cosine search over a retrieval pool.
//!
//! Pool vectors are normalized once at build time; a query is normalized and
//! scored against every pool row with a tiled dot-product scan. Selection is
//! exact, ordered by similarity descending and then by ascending pool
//! position, so results are fully deterministic.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::dataset::RetrievalPool;
use crate::error::{Error, Result};

/// Independent accumulators per query inside the dot-product kernel.
const LANES: usize = 4;
/// Queries scored together against each pool row.
const QUERY_GROUP: usize = 4;
/// Queries handled by one parallel task.
const QUERY_BLOCK: usize = 32;
/// Pool rows kept hot while a query block sweeps over them.
const ROW_TILE: usize = 32;

/// One retrieved pool image.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    /// Position in the retrieval pool (manifest order of the train split).
    pub position: usize,
    pub image_id: String,
    pub similarity: f64,
}

/// Ranked neighbors of one query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub query_id: String,
    pub neighbors: Vec<Neighbor>,
}

impl RetrievalResult {
    pub fn k(&self) -> usize {
        self.neighbors.len()
    }
}

/// A query to score: its identifier (used in results and error messages) and
/// its raw feature vector.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub id: &'a str,
    pub vector: &'a [f32],
}

/// Immutable unit-normalized copy of the pool.
#[derive(Debug, Clone)]
pub struct NormalizedIndex {
    dim: usize,
    rows: Vec<f64>,
    image_ids: Vec<String>,
    lesion_ids: Vec<String>,
    labels: Vec<String>,
    by_id: HashMap<String, usize>,
}

/// Pool entry for [`NormalizedIndex::from_entries`].
#[derive(Debug, Clone, Copy)]
pub struct IndexEntry<'a> {
    pub image_id: &'a str,
    pub lesion_id: &'a str,
    pub label: &'a str,
    pub vector: &'a [f32],
}

impl NormalizedIndex {
    pub fn build(pool: &RetrievalPool<'_>) -> Result<Self> {
        Self::from_entries(pool.records().map(|r| IndexEntry {
            image_id: &r.image_id,
            lesion_id: &r.lesion_id,
            label: &r.label,
            vector: &r.vector,
        }))
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = IndexEntry<'a>>) -> Result<Self> {
        let mut index = NormalizedIndex {
            dim: 0,
            rows: Vec::new(),
            image_ids: Vec::new(),
            lesion_ids: Vec::new(),
            labels: Vec::new(),
            by_id: HashMap::new(),
        };
        for entry in entries {
            if index.image_ids.is_empty() {
                index.dim = entry.vector.len();
            }
            if entry.vector.len() != index.dim || index.dim == 0 {
                return Err(Error::DimensionalityMismatch {
                    context: format!("pool image {:?}", entry.image_id),
                    expected: index.dim,
                    found: entry.vector.len(),
                });
            }
            let unit = normalize(entry.vector).map_err(|e| match e {
                Error::ZeroNorm(_) => Error::ZeroNorm(entry.image_id.to_string()),
                Error::NonFinite { position, .. } => Error::NonFinite {
                    image_id: entry.image_id.to_string(),
                    position,
                },
                other => other,
            })?;
            index.rows.extend_from_slice(&unit);
            if index
                .by_id
                .insert(entry.image_id.to_string(), index.image_ids.len())
                .is_some()
            {
                return Err(Error::DuplicateImageId(entry.image_id.to_string()));
            }
            index.image_ids.push(entry.image_id.to_string());
            index.lesion_ids.push(entry.lesion_id.to_string());
            index.labels.push(entry.label.to_string());
        }
        if index.image_ids.is_empty() {
            return Err(Error::EmptyPool);
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The stored unit vector at pool position `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn image_id(&self, i: usize) -> &str {
        &self.image_ids[i]
    }

    pub fn lesion_id(&self, i: usize) -> &str {
        &self.lesion_ids[i]
    }

    pub fn label(&self, i: usize) -> &str {
        &self.labels[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.by_id.get(image_id).copied()
    }

    /// Cosine similarity of `query` to every pool row, in pool order.
    pub fn similarities(&self, query: &[f32]) -> Result<Vec<f64>> {
        let q = self.prepare(query)?;
        let mut out = vec![vec![0.0; self.len()]];
        self.score_block(std::slice::from_ref(&q), &mut out);
        Ok(out.pop().unwrap_or_default())
    }

    /// The `k` most similar pool images for one query.
    pub fn top_k(&self, query: Query<'_>, k: usize) -> Result<RetrievalResult> {
        self.check_k(k)?;
        let q = self.prepare(query.vector).map_err(|e| Error::Query {
            query: query.id.to_string(),
            source: Box::new(e),
        })?;
        let mut scores = vec![vec![0.0; self.len()]];
        self.score_block(std::slice::from_ref(&q), &mut scores);
        Ok(self.result(query.id, &scores[0], k))
    }

    /// [`top_k`](Self::top_k) for many queries. Query blocks are scored in
    /// parallel on the current rayon pool; element `i` of the output always
    /// equals the single-query result for `queries[i]`.
    pub fn batch_top_k(&self, queries: &[Query<'_>], k: usize) -> Result<Vec<RetrievalResult>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        self.check_k(k)?;
        let prepared = queries
            .iter()
            .map(|q| {
                self.prepare(q.vector).map_err(|e| Error::Query {
                    query: q.id.to_string(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let blocks: Vec<Vec<RetrievalResult>> = prepared
            .par_chunks(QUERY_BLOCK)
            .zip(queries.par_chunks(QUERY_BLOCK))
            .map(|(block, ids)| {
                let mut scores = vec![vec![0.0; self.len()]; block.len()];
                self.score_block(block, &mut scores);
                ids.iter()
                    .zip(&scores)
                    .map(|(q, s)| self.result(q.id, s, k))
                    .collect()
            })
            .collect();
        Ok(blocks.into_iter().flatten().collect())
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::ZeroK);
        }
        if k > self.len() {
            return Err(Error::KExceedsPool { k, pool: self.len() });
        }
        Ok(())
    }

    fn prepare(&self, query: &[f32]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::DimensionalityMismatch {
                context: "query".into(),
                expected: self.dim,
                found: query.len(),
            });
        }
        normalize(query)
    }

    fn result(&self, query_id: &str, scores: &[f64], k: usize) -> RetrievalResult {
        let neighbors = select_top_k(scores, k)
            .into_iter()
            .map(|(position, similarity)| Neighbor {
                position,
                image_id: self.image_ids[position].clone(),
                similarity,
            })
            .collect();
        RetrievalResult {
            query_id: query_id.to_string(),
            neighbors,
        }
    }

    /// Fills `out[q][row]` with the clamped similarity of each prepared query
    /// to each pool row. Per (query, row) pair the arithmetic is identical
    /// regardless of how many queries share the block.
    fn score_block(&self, queries: &[Vec<f64>], out: &mut [Vec<f64>]) {
        let n = self.len();
        for tile in (0..n).step_by(ROW_TILE) {
            let tile_end = (tile + ROW_TILE).min(n);
            let mut q0 = 0;
            while q0 + QUERY_GROUP <= queries.len() {
                let group: [&[f64]; QUERY_GROUP] = std::array::from_fn(|j| queries[q0 + j].as_slice());
                for r in tile..tile_end {
                    let s = dot_group(group, self.row(r));
                    for (j, v) in s.into_iter().enumerate() {
                        out[q0 + j][r] = clamp_similarity(v);
                    }
                }
                q0 += QUERY_GROUP;
            }
            for q in q0..queries.len() {
                for r in tile..tile_end {
                    let [v] = dot_group([queries[q].as_slice()], self.row(r));
                    out[q][r] = clamp_similarity(v);
                }
            }
        }
    }
}

impl crate::classify::LabelLookup for NormalizedIndex {
    fn label_of(&self, image_id: &str) -> Option<&str> {
        self.position(image_id).map(|i| self.label(i))
    }
}

#[inline(always)]
fn dot_group<const Q: usize>(queries: [&[f64]; Q], row: &[f64]) -> [f64; Q] {
    let mut acc = [[0.0f64; LANES]; Q];
    let body = row.len() / LANES * LANES;
    for (c, r) in row[..body].chunks_exact(LANES).enumerate() {
        let base = c * LANES;
        for (a, q) in acc.iter_mut().zip(queries.iter()) {
            let q = &q[base..base + LANES];
            for l in 0..LANES {
                a[l] += q[l] * r[l];
            }
        }
    }
    std::array::from_fn(|j| {
        let a = acc[j];
        let mut tail = 0.0;
        for i in body..row.len() {
            tail += queries[j][i] * row[i];
        }
        ((a[0] + a[1]) + (a[2] + a[3])) + tail
    })
}

/// Clamps rounding excursions into `[-1, 1]` and folds `-0.0` into `0.0` so
/// equal similarities compare equal under a total order.
#[inline]
fn clamp_similarity(v: f64) -> f64 {
    v.clamp(-1.0, 1.0) + 0.0
}

fn normalize(v: &[f32]) -> Result<Vec<f64>> {
    if let Some(position) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            image_id: String::new(),
            position,
        });
    }
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroNorm(String::new()));
    }
    Ok(v.iter().map(|&x| f64::from(x) / norm).collect())
}

/// Indices of the `k` largest scores, similarity descending, ties by
/// ascending index.
pub fn select_top_k(scores: &[f64], k: usize) -> Vec<(usize, f64)> {
    let order = |a: &usize, b: &usize| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let k = k.min(idx.len());
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    idx.into_iter().map(|i| (i, scores[i])).collect()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)` accumulated in `f64`, clamped to
/// `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 {
        return Err(Error::ZeroNorm("left operand".into()));
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm("right operand".into()));
    }
    Ok(clamp_similarity(dot / (na.sqrt() * nb.sqrt())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn index_of(vectors: &[Vec<f32>]) -> NormalizedIndex {
        let ids: Vec<String> = (0..vectors.len()).map(|i| format!("p{i}")).collect();
        NormalizedIndex::from_entries(vectors.iter().zip(&ids).map(|(v, id)| IndexEntry {
            image_id: id,
            lesion_id: id,
            label: "x",
            vector: v,
        }))
        .unwrap()
    }

    fn q(v: &[f32]) -> Query<'_> {
        Query { id: "q", vector: v }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[2.0, 2.0, 2.0], &[5.0, 5.0, 5.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm(_))
        ));
        assert!(matches!(
            cosine(&[1.0], &[1.0, 0.0]),
            Err(Error::LengthMismatch { .. })
        ));
        // clamped even if rounding overshoots
        let v = [0.1f32, 0.7, 0.3, 1e-3];
        assert!(cosine(&v, &v).unwrap() <= 1.0);
    }

    #[test]
    fn normalizes_stored_rows() {
        let idx = index_of(&[vec![3.0, 4.0]]);
        assert_eq!(idx.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn zero_norm_reports_image() {
        let err = NormalizedIndex::from_entries([IndexEntry {
            image_id: "bad",
            lesion_id: "l",
            label: "x",
            vector: &[0.0, 0.0],
        }])
        .unwrap_err();
        assert!(matches!(err, Error::ZeroNorm(id) if id == "bad"));
    }

    #[test]
    fn stored_norms_are_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vs: Vec<Vec<f32>> = (0..100)
            .map(|_| (0..17).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let idx = index_of(&vs);
        for i in 0..idx.len() {
            let norm: f64 = idx.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_best_match() {
        let idx = index_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = idx.top_k(q(&[1.0, 0.0]), 1).unwrap();
        assert_eq!(r.neighbors.len(), 1);
        assert_eq!(r.neighbors[0].image_id, "p0");
        assert_eq!(r.neighbors[0].similarity, 1.0);
    }

    #[test]
    fn identical_vectors_come_back_in_pool_order() {
        let idx = index_of(&vec![vec![0.3, 0.3, 0.9]; 9]);
        let r = idx.top_k(q(&[0.3, 0.3, 0.9]), 9).unwrap();
        let pos: Vec<usize> = r.neighbors.iter().map(|n| n.position).collect();
        assert_eq!(pos, (0..9).collect::<Vec<_>>());
        assert!(r.neighbors.iter().all(|n| n.similarity == 1.0));
    }

    #[test]
    fn bad_k_and_query() {
        let idx = index_of(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(idx.top_k(q(&[1.0, 0.0]), 0), Err(Error::ZeroK)));
        assert!(matches!(
            idx.top_k(q(&[1.0, 0.0]), 3),
            Err(Error::KExceedsPool { k: 3, pool: 2 })
        ));
        let err = idx.top_k(q(&[0.0, 0.0]), 1).unwrap_err();
        assert!(matches!(err, Error::Query { ref query, .. } if query == "q"));
        assert!(idx.batch_top_k(&[], 1).unwrap().is_empty());
    }

    #[test]
    fn select_breaks_ties_by_position() {
        let got = select_top_k(&[0.5, 0.9, 0.5, 0.9, 0.1], 3);
        assert_eq!(got, vec![(1, 0.9), (3, 0.9), (0, 0.5)]);
        let got = select_top_k(&[-0.0, 0.0], 2);
        assert_eq!(got.iter().map(|p| p.0).collect::<Vec<_>>(), [0, 1]);
    }

    #[test]
    fn batch_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pool: Vec<Vec<f32>> = (0..1000)
            .map(|_| (0..23).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let idx = index_of(&pool);
        let queries: Vec<Vec<f32>> = (0..100)
            .map(|_| (0..23).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ids: Vec<String> = (0..queries.len()).map(|i| format!("q{i}")).collect();
        let qs: Vec<Query> = queries
            .iter()
            .zip(&ids)
            .map(|(v, id)| Query { id, vector: v })
            .collect();
        let batch = idx.batch_top_k(&qs, 10).unwrap();
        for (b, q) in batch.iter().zip(&qs) {
            assert_eq!(b, &idx.top_k(*q, 10).unwrap());
        }
        assert_eq!(
            idx.batch_top_k(&qs[..1], 10).unwrap()[0],
            idx.top_k(qs[0], 10).unwrap()
        );
    }
}
