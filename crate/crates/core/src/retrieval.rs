//! Exact cosine k-NN over unit embeddings and the mAP@k metric.
//!
//! `map_at_k_reference` is a deliberately naive second scorer kept next to
//! the main implementation so the metric definition stays auditable.

use std::collections::{BinaryHeap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::features::{FeatureStore, UNLABELED};

/// Id-ordered matrix of unit embeddings with class labels.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    pub ids: Vec<String>,
    pub embeddings: Vec<f64>, // n x dim, row-major
    pub labels: Vec<u32>,
    pub dim: usize,
}

/// Ranked neighbors for one query; scores nonincreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct Ranking {
    pub query_id: String,
    pub neighbors: Vec<(String, f64)>,
    /// Set when fewer than k candidates were available.
    pub truncated: bool,
}

/// Builds an index, validating id uniqueness and unit rows (1e-4 tolerance).
pub fn build_index(
    ids: Vec<String>,
    embeddings: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
) -> Result<RetrievalIndex> {
    let n = ids.len();
    if embeddings.len() != n * dim || labels.len() != n {
        return Err(Error::Domain("build_index length mismatch".into()));
    }
    let mut seen = HashSet::new();
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    for (i, row) in embeddings.chunks(dim).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!(
                "embedding row {i} ({:?}) has norm {norm}, not unit within 1e-4",
                ids[i]
            )));
        }
    }
    Ok(RetrievalIndex { ids, embeddings, labels, dim })
}

/// Builds an index straight from an embedding store (e.g. an `embed` output
/// file), widening the stored f32 rows.
pub fn index_from_store(store: &FeatureStore) -> Result<RetrievalIndex> {
    let dim = store.dimension as usize;
    let mut ids = Vec::with_capacity(store.records.len());
    let mut labels = Vec::with_capacity(store.records.len());
    let mut embeddings = Vec::with_capacity(store.records.len() * dim);
    for r in &store.records {
        ids.push(r.image_id.clone());
        labels.push(r.class_id);
        embeddings.extend(r.feature.iter().map(|v| *v as f64));
    }
    build_index(ids, embeddings, labels, dim)
}

// Heap entry ordered so the heap root is the *worst* kept candidate:
// lowest score first, and at equal score the lexicographically larger id
// (which loses the ascending-id tie-break) is evicted first.
struct HeapEntry<'a> {
    score: f64,
    id: &'a str,
    idx: usize,
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.score == other.score && self.id == other.id
    }
}
impl Eq for HeapEntry<'_> {}
impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry<'_> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .expect("finite scores")
            .then_with(|| self.id.cmp(other.id))
    }
}

/// Top-k cosine neighbors; ties broken by ascending image_id. Fewer than k
/// candidates yields a truncated (flagged) ranking, an empty candidate set
/// is an error.
pub fn knn(
    index: &RetrievalIndex,
    query: &[f64],
    k: usize,
    exclude_id: Option<&str>,
) -> Result<Ranking> {
    if k == 0 {
        return Err(Error::Domain("knn requires k >= 1".into()));
    }
    if query.len() != index.dim {
        return Err(Error::Domain(format!(
            "query dim {} != index dim {}",
            query.len(),
            index.dim
        )));
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for (i, row) in index.embeddings.chunks(index.dim).enumerate() {
        if exclude_id == Some(index.ids[i].as_str()) {
            continue;
        }
        let score: f64 = row.iter().zip(query).map(|(a, b)| a * b).sum();
        heap.push(HeapEntry { score, id: &index.ids[i], idx: i });
        if heap.len() > k {
            heap.pop();
        }
    }
    if heap.is_empty() {
        return Err(Error::Domain("knn over an empty candidate set".into()));
    }
    let mut kept: Vec<HeapEntry> = heap.into_vec();
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.id.cmp(b.id))
    });
    let truncated = kept.len() < k;
    Ok(Ranking {
        query_id: exclude_id.unwrap_or("").to_string(),
        neighbors: kept
            .into_iter()
            .map(|e| (index.ids[e.idx].clone(), e.score))
            .collect(),
        truncated,
    })
}

/// mAP@k with per-query AP normalized by `min(m_q, k)`:
/// `AP@k = (1/min(m_q,k)) * sum_j P(j) * rel(j)`.
pub fn map_at_k(
    rankings: &[Ranking],
    relevant: &HashMap<String, HashSet<String>>,
    k: usize,
) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Domain("map_at_k over zero queries".into()));
    }
    let mut total = 0.0;
    for r in rankings {
        let rel = relevant.get(&r.query_id).ok_or_else(|| {
            Error::Domain(format!("no relevance set for query {:?}", r.query_id))
        })?;
        if rel.is_empty() {
            return Err(Error::Domain(format!(
                "query {:?} has zero relevant items",
                r.query_id
            )));
        }
        if r.neighbors.len() > k {
            return Err(Error::Domain(format!(
                "ranking for {:?} longer than k={k}",
                r.query_id
            )));
        }
        let denom = rel.len().min(k) as f64;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (j, (id, _)) in r.neighbors.iter().enumerate() {
            if rel.contains(id) {
                hits += 1;
                ap += hits as f64 / (j + 1) as f64;
            }
        }
        total += ap / denom;
    }
    Ok(total / rankings.len() as f64)
}

/// Independent brute-force scorer: recomputes P(j) by re-scanning the
/// ranking prefix at every position. Kept free of shared code with
/// `map_at_k` beyond the types.
pub fn map_at_k_reference(
    rankings: &[Ranking],
    relevant: &HashMap<String, HashSet<String>>,
    k: usize,
) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Domain("map_at_k over zero queries".into()));
    }
    let mut aps = Vec::new();
    for r in rankings {
        let rel = relevant
            .get(&r.query_id)
            .ok_or_else(|| Error::Domain(format!("no relevance set for {:?}", r.query_id)))?;
        if rel.is_empty() {
            return Err(Error::Domain("zero relevant items".into()));
        }
        let m_q = rel.len();
        let norm = if m_q < k { m_q } else { k };
        let mut ap = 0.0;
        for j in 1..=r.neighbors.len().min(k) {
            let rel_j = rel.contains(&r.neighbors[j - 1].0);
            if rel_j {
                let mut in_prefix = 0;
                for (id, _) in &r.neighbors[..j] {
                    if rel.contains(id) {
                        in_prefix += 1;
                    }
                }
                ap += in_prefix as f64 / j as f64;
            }
        }
        aps.push(ap / norm as f64);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Leave-one-out retrieval evaluation over labeled embeddings: each record
/// is a query against all others; relevance = same class. Records whose
/// class has a single member, or with the unlabeled sentinel, are skipped
/// as queries (they still serve as index distractors).
pub fn leave_one_out_map(index: &RetrievalIndex, k: usize) -> Result<f64> {
    let mut class_counts: HashMap<u32, usize> = HashMap::new();
    for &l in &index.labels {
        *class_counts.entry(l).or_insert(0) += 1;
    }
    let mut rankings = Vec::new();
    let mut relevant: HashMap<String, HashSet<String>> = HashMap::new();
    for (i, row) in index.embeddings.chunks(index.dim).enumerate() {
        let label = index.labels[i];
        if label == UNLABELED || class_counts[&label] < 2 {
            continue;
        }
        let ranking = knn(index, row, k, Some(index.ids[i].as_str()))?;
        let rel: HashSet<String> = index
            .ids
            .iter()
            .zip(&index.labels)
            .filter(|(id, l)| **l == label && id.as_str() != index.ids[i])
            .map(|(id, _)| id.clone())
            .collect();
        relevant.insert(index.ids[i].clone(), rel);
        rankings.push(ranking);
    }
    if rankings.is_empty() {
        return Err(Error::Config(
            "no evaluable queries: every class has fewer than two labeled members".into(),
        ));
    }
    map_at_k(&rankings, &relevant, k)
}
