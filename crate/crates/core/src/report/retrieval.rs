//! Exact cosine nearest-neighbour retrieval over normalized embeddings.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::contrastive::{cosine_similarity, EmbeddingRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub source_id: String,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    /// Descending similarity, ties by ascending source id.
    pub neighbors: Vec<Neighbor>,
}

fn rank_order(a: &(usize, f64), b: &(usize, f64), corpus: &[EmbeddingRecord]) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| corpus[a.0].source_id.cmp(&corpus[b.0].source_id))
}

/// The `k` candidates (indices into `corpus`) most similar to `query`, best first.
pub(crate) fn top_k(
    query: &[f64],
    corpus: &[EmbeddingRecord],
    candidates: impl IntoIterator<Item = usize>,
    k: usize,
) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = candidates
        .into_iter()
        .map(|i| (i, cosine_similarity(query, &corpus[i].normalized)))
        .collect();
    let cmp = |a: &(usize, f64), b: &(usize, f64)| rank_order(a, b, corpus);
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    scored
}

/// Exact top-`k` neighbours of `query` in `corpus` by cosine similarity of
/// the normalized embeddings. Entries sharing the query's source id are
/// skipped. A `k` larger than the corpus yields every candidate.
pub fn nearest_neighbors(query: &EmbeddingRecord, corpus: &[EmbeddingRecord], k: usize) -> Result<RetrievalResult> {
    if corpus.is_empty() {
        return Err(Error::config("retrieval corpus is empty"));
    }
    let candidates: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus[i].source_id != query.source_id)
        .collect();
    if k > candidates.len() {
        log::warn!(
            "requested {k} neighbours of `{}` but only {} candidates exist",
            query.source_id,
            candidates.len()
        );
    }
    let neighbors = top_k(&query.normalized, corpus, candidates, k)
        .into_iter()
        .map(|(i, similarity)| Neighbor {
            source_id: corpus[i].source_id.clone(),
            similarity,
        })
        .collect();
    Ok(RetrievalResult {
        query_id: query.source_id.clone(),
        neighbors,
    })
}

/// Fraction of `queries` whose nearest `corpus` entry has the same class.
pub fn one_nn_accuracy(queries: &[EmbeddingRecord], corpus: &[EmbeddingRecord]) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::config("no queries for 1-NN evaluation"));
    }
    let mut hits = 0;
    for q in queries {
        let candidates = (0..corpus.len()).filter(|&i| corpus[i].source_id != q.source_id);
        if let Some(&(best, _)) = top_k(&q.normalized, corpus, candidates, 1).first() {
            hits += usize::from(corpus[best].class_label == q.class_label);
        }
    }
    Ok(hits as f64 / queries.len() as f64)
}
