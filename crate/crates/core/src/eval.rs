//! Ranking metrics and report assembly.
//!
//! Relevance is binary. NDCG discounts rank `i` (1-based) by `log2(i + 1)`
//! and normalizes by the ideal DCG over `min(k, |relevant|)` positions.
//! Metrics are macro-averaged over queries; queries without labels are
//! excluded and counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{QueryRecord, ToolKey};
use crate::sandbox::{classify, FailureClass};
use crate::trial::{EvidenceTuple, TrialStatus};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("empty query set")]
    EmptyQuerySet,
    #[error("no k values")]
    NoKValues,
    #[error("method `{method}` has no ranking for queries: {}", .query_ids.join(", "))]
    MissingOutputs { method: String, query_ids: Vec<String> },
    #[error("query {query_id}: no evidence for ranked candidate {candidate}")]
    MissingEvidence { query_id: String, candidate: String },
    #[error("evidence required for pass_rate")]
    EvidenceRequired,
    #[error("no completed trials")]
    NoTrials,
}

fn check(k: usize, relevant_len: usize) -> Result<(), EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if relevant_len == 0 {
        return Err(EvalError::EmptyRelevant);
    }
    Ok(())
}

/// `|top-k ∩ relevant| / |relevant|`.
pub fn recall_at_k<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>, k: usize) -> Result<f64, EvalError> {
    check(k, relevant.len())?;
    let hits: BTreeSet<&T> = ranked.iter().take(k).filter(|t| relevant.contains(t)).collect();
    Ok(hits.len() as f64 / relevant.len() as f64)
}

pub fn ndcg_at_k<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>, k: usize) -> Result<f64, EvalError> {
    check(k, relevant.len())?;
    let mut seen = BTreeSet::new();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, t)| relevant.contains(t) && seen.insert(*t))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len())).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Ok(dcg / ideal)
}

/// Whether some top-k candidate is successful (and relevant, when
/// `requires_relevance`). Missing evidence for a top-k candidate is an error.
pub fn passes_at_k<T: Ord + Display>(
    ranked: &[T],
    relevant: &BTreeSet<T>,
    status_of: impl Fn(&T) -> Option<TrialStatus>,
    k: usize,
    requires_relevance: bool,
) -> Result<bool, EvalError> {
    check(k, relevant.len())?;
    let mut pass = false;
    for t in ranked.iter().take(k) {
        let status = status_of(t).ok_or_else(|| EvalError::MissingEvidence {
            query_id: String::new(),
            candidate: t.to_string(),
        })?;
        if status.is_success() && (!requires_relevance || relevant.contains(t)) {
            pass = true;
        }
    }
    Ok(pass)
}

/// Fractions per class over all trials; every class is present.
pub fn failure_breakdown<'a>(
    evidence: impl IntoIterator<Item = &'a EvidenceTuple>,
) -> Result<BTreeMap<FailureClass, f64>, EvalError> {
    let mut counts: BTreeMap<FailureClass, usize> = FailureClass::ALL.iter().map(|c| (*c, 0)).collect();
    let mut total = 0usize;
    for e in evidence {
        *counts.get_mut(&classify(e)).expect("all classes present") += 1;
        total += 1;
    }
    if total == 0 {
        return Err(EvalError::NoTrials);
    }
    Ok(counts.into_iter().map(|(c, n)| (c, n as f64 / total as f64)).collect())
}

/// Rankings from one method, keyed by query id.
#[derive(Debug, Clone, Default)]
pub struct MethodRun {
    pub name: String,
    pub rankings: BTreeMap<String, Vec<ToolKey>>,
}

/// Per-query evidence, keyed by query id.
pub type EvidenceByQuery = BTreeMap<String, BTreeMap<ToolKey, EvidenceTuple>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub k_values: Vec<usize>,
    pub pass_rate: bool,
    pub pass_rate_requires_relevance: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k_values: vec![1, 3, 5, 10],
            pass_rate: true,
            pass_rate_requires_relevance: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub recall: f64,
    pub ndcg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub methods: BTreeMap<String, BTreeMap<usize, MetricRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_histogram: Option<BTreeMap<FailureClass, f64>>,
    pub query_count: usize,
    pub excluded_queries: usize,
    pub pass_rate_definition: String,
    pub config_digest: String,
    /// Wall-clock time of report creation; the only non-deterministic field.
    pub generated_at_unix: u64,
}

pub const PASS_RATE_WITH_RELEVANCE: &str =
    "a query passes at K when a top-K candidate is relevant and its trial status is SUCCESS_REAL or SUCCESS_SIMULATED";
pub const PASS_RATE_EXECUTION_ONLY: &str =
    "a query passes at K when a top-K candidate has trial status SUCCESS_REAL or SUCCESS_SIMULATED";

pub fn evaluate(
    methods: &[MethodRun],
    queries: &[QueryRecord],
    evidence: Option<&EvidenceByQuery>,
    opts: &EvalOptions,
    config_digest: &str,
) -> Result<MetricsReport, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    if opts.k_values.is_empty() {
        return Err(EvalError::NoKValues);
    }
    if opts.k_values.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    if opts.pass_rate && evidence.is_none() {
        return Err(EvalError::EvidenceRequired);
    }
    let labeled: Vec<&QueryRecord> = queries.iter().filter(|q| !q.relevant.is_empty()).collect();
    let excluded = queries.len() - labeled.len();
    if labeled.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }

    let mut table = BTreeMap::new();
    for method in methods {
        let missing: Vec<String> = labeled
            .iter()
            .filter(|q| !method.rankings.contains_key(&q.query_id))
            .map(|q| q.query_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(EvalError::MissingOutputs {
                method: method.name.clone(),
                query_ids: missing,
            });
        }
        let mut rows = BTreeMap::new();
        for &k in &opts.k_values {
            let (mut recall, mut ndcg, mut passed) = (0.0, 0.0, 0usize);
            for q in &labeled {
                let ranked = &method.rankings[&q.query_id];
                recall += recall_at_k(ranked, &q.relevant, k)?;
                ndcg += ndcg_at_k(ranked, &q.relevant, k)?;
                if let Some(ev) = evidence.filter(|_| opts.pass_rate) {
                    let per_query = ev.get(&q.query_id);
                    let status_of = |key: &ToolKey| per_query.and_then(|m| m.get(key)).map(|e| e.status);
                    let pass = passes_at_k(ranked, &q.relevant, status_of, k, opts.pass_rate_requires_relevance)
                        .map_err(|e| match e {
                            EvalError::MissingEvidence { candidate, .. } => EvalError::MissingEvidence {
                                query_id: q.query_id.clone(),
                                candidate,
                            },
                            other => other,
                        })?;
                    passed += usize::from(pass);
                }
            }
            let n = labeled.len() as f64;
            rows.insert(
                k,
                MetricRow {
                    recall: recall / n,
                    ndcg: ndcg / n,
                    pass_rate: opts.pass_rate.then(|| passed as f64 / n),
                },
            );
        }
        table.insert(method.name.clone(), rows);
    }

    let failure_histogram = match evidence {
        Some(ev) => Some(failure_breakdown(ev.values().flat_map(|m| m.values()))?),
        None => None,
    };
    Ok(MetricsReport {
        methods: table,
        failure_histogram,
        query_count: labeled.len(),
        excluded_queries: excluded,
        pass_rate_definition: if opts.pass_rate_requires_relevance {
            PASS_RATE_WITH_RELEVANCE
        } else {
            PASS_RATE_EXECUTION_ONLY
        }
        .to_string(),
        config_digest: config_digest.to_string(),
        generated_at_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

impl MetricsReport {
    /// One row per (method, k).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "k", "recall", "ndcg", "pass_rate"])
            .expect("in-memory write");
        for (method, rows) in &self.methods {
            for (k, row) in rows {
                w.write_record([
                    method.clone(),
                    k.to_string(),
                    format!("{:.6}", row.recall),
                    format!("{:.6}", row.ndcg),
                    row.pass_rate.map(|p| format!("{p:.6}")).unwrap_or_default(),
                ])
                .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    pub fn row(&self, method: &str, k: usize) -> Option<&MetricRow> {
        self.methods.get(method)?.get(&k)
    }
}
