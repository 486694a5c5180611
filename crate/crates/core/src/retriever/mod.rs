//! Initial semantic ranking: sparse BM25 over tool text, optionally fused
//! with dense cosine scores from an external embedding endpoint.

mod bm25;
mod embedding;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::ToolKey;

pub use bm25::{document_text, tokenize, Bm25Index, Bm25Params};
pub use embedding::{cosine_to_unit, EmbeddingClient};

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("empty query")]
    EmptyQuery,
    #[error("k must be positive")]
    ZeroK,
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("dense score for {key} is {score}, outside [0, 1]")]
    DenseOutOfRange { key: ToolKey, score: f64 },
    #[error("embedding endpoint: {0}")]
    Embedding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tool_id: String,
    pub api_name: String,
    pub sparse_score: f64,
    /// Per-query min-max normalized sparse score.
    pub sparse_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense_score: Option<f64>,
    pub fused_score: f64,
}

impl Candidate {
    pub fn key(&self) -> ToolKey {
        ToolKey::new(&self.tool_id, &self.api_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub ranked: Vec<Candidate>,
    pub k: usize,
}

impl CandidateList {
    pub fn keys(&self) -> Vec<ToolKey> {
        self.ranked.iter().map(Candidate::key).collect()
    }

    pub fn get(&self, key: &ToolKey) -> Option<&Candidate> {
        self.ranked
            .iter()
            .find(|c| c.tool_id == key.tool_id && c.api_name == key.api_name)
    }
}

/// Min-max normalization onto [0, 1]. A constant (or single-element) input
/// maps to all ones.
pub fn min_max(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let span = max - min;
    scores
        .iter()
        .map(|&s| if span > 0.0 { (s - min) / span } else { 1.0 })
        .collect()
}

/// Fused score descending, then `(tool_id, api_name)` ascending.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.fused_score
        .total_cmp(&a.fused_score)
        .then_with(|| a.tool_id.cmp(&b.tool_id))
        .then_with(|| a.api_name.cmp(&b.api_name))
}

pub(crate) fn sort_candidates(ranked: &mut [Candidate]) {
    ranked.sort_by(candidate_order);
}

/// Convex combination of normalized dense and sparse scores.
///
/// Dense scores are min-max normalized over the candidates that have one;
/// candidates missing from `dense` keep their normalized sparse score.
pub fn fuse(
    sparse: &CandidateList,
    dense: &BTreeMap<ToolKey, f64>,
    alpha: f64,
) -> Result<CandidateList, RetrieveError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RetrieveError::InvalidAlpha(alpha));
    }
    for (key, &score) in dense {
        if !(0.0..=1.0).contains(&score) {
            return Err(RetrieveError::DenseOutOfRange {
                key: key.clone(),
                score,
            });
        }
    }
    let present: Vec<(usize, f64)> = sparse
        .ranked
        .iter()
        .enumerate()
        .filter_map(|(i, c)| dense.get(&c.key()).map(|&d| (i, d)))
        .collect();
    let dense_norms = min_max(&present.iter().map(|(_, d)| *d).collect::<Vec<_>>());
    let mut ranked = sparse.ranked.clone();
    for c in &mut ranked {
        c.dense_score = None;
        c.fused_score = c.sparse_norm;
    }
    for ((i, raw), norm) in present.into_iter().zip(dense_norms) {
        let c = &mut ranked[i];
        c.dense_score = Some(raw);
        c.fused_score = alpha * norm + (1.0 - alpha) * c.sparse_norm;
    }
    sort_candidates(&mut ranked);
    Ok(CandidateList {
        query_id: sparse.query_id.clone(),
        ranked,
        k: sparse.k,
    })
}

/// Checks the ordering and uniqueness invariants of a candidate list.
pub fn check_candidate_list(list: &CandidateList) -> Result<(), String> {
    let mut seen = HashSet::new();
    for c in &list.ranked {
        if !seen.insert(c.key()) {
            return Err(format!("duplicate candidate {}", c.key()));
        }
    }
    for pair in list.ranked.windows(2) {
        if candidate_order(&pair[0], &pair[1]) == Ordering::Greater {
            return Err(format!("{} ranked above {}", pair[0].key(), pair[1].key()));
        }
    }
    Ok(())
}
