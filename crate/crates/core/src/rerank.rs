//! Evidence-driven re-ranking.
//!
//! Two modes share one output shape. The deterministic comparator sorts by
//! trial status priority, then fused retrieval score, then key. The LLM mode
//! asks the evaluator prompt for a `[tool, api]` list; anything it omits is
//! appended in comparator order, and unusable output falls back to the
//! comparator entirely.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Corpus, ToolKey};
use crate::llm::{parse_json_payload, CompletionRequest, LlmProvider, PromptRole, PromptSet};
use crate::retriever::{Candidate, CandidateList};
use crate::trial::{EvidenceTuple, TrialStatus};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    Llm,
    #[default]
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSource {
    Llm,
    Deterministic,
    LlmFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub tool_id: String,
    pub api_name: String,
    pub evidence_summary: String,
    pub rank_source: RankSource,
}

impl RankedEntry {
    pub fn key(&self) -> ToolKey {
        ToolKey::new(&self.tool_id, &self.api_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedOutcome {
    pub query_id: String,
    pub ranked: Vec<RankedEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl RankedOutcome {
    pub fn keys(&self) -> Vec<ToolKey> {
        self.ranked.iter().map(RankedEntry::key).collect()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RerankError {
    #[error("no evidence for candidate {0}")]
    MissingEvidence(ToolKey),
}

/// Lower is better.
pub fn priority(status: TrialStatus) -> u8 {
    match status {
        TrialStatus::SuccessReal => 0,
        TrialStatus::SuccessSimulated => 1,
        TrialStatus::OtherNonerror => 2,
        TrialStatus::SimulationFailed => 3,
        TrialStatus::PlanningFailed => 4,
    }
}

/// Total order used by the deterministic mode.
pub fn evidence_order(
    a: (&Candidate, &EvidenceTuple),
    b: (&Candidate, &EvidenceTuple),
    latency_tiebreak: bool,
) -> Ordering {
    let (ca, ea) = a;
    let (cb, eb) = b;
    priority(ea.status)
        .cmp(&priority(eb.status))
        .then_with(|| {
            if latency_tiebreak && ea.status == TrialStatus::SuccessReal {
                ea.metadata.latency_ms.cmp(&eb.metadata.latency_ms)
            } else {
                Ordering::Equal
            }
        })
        .then_with(|| cb.fused_score.total_cmp(&ca.fused_score))
        .then_with(|| (&ca.tool_id, &ca.api_name).cmp(&(&cb.tool_id, &cb.api_name)))
}

fn paired<'a>(
    candidates: &'a CandidateList,
    evidence: &'a BTreeMap<ToolKey, EvidenceTuple>,
) -> Result<Vec<(&'a Candidate, &'a EvidenceTuple)>, RerankError> {
    candidates
        .ranked
        .iter()
        .map(|c| {
            let key = c.key();
            match evidence.get(&key) {
                Some(e) => Ok((c, e)),
                None => Err(RerankError::MissingEvidence(key)),
            }
        })
        .collect()
}

fn entry(c: &Candidate, e: &EvidenceTuple, source: RankSource) -> RankedEntry {
    RankedEntry {
        tool_id: c.tool_id.clone(),
        api_name: c.api_name.clone(),
        evidence_summary: e.summary(),
        rank_source: source,
    }
}

pub fn rerank_deterministic(
    candidates: &CandidateList,
    evidence: &BTreeMap<ToolKey, EvidenceTuple>,
    latency_tiebreak: bool,
) -> Result<RankedOutcome, RerankError> {
    let mut pairs = paired(candidates, evidence)?;
    pairs.sort_by(|a, b| evidence_order(*a, *b, latency_tiebreak));
    Ok(RankedOutcome {
        query_id: candidates.query_id.clone(),
        ranked: pairs
            .into_iter()
            .map(|(c, e)| entry(c, e, RankSource::Deterministic))
            .collect(),
        warnings: Vec::new(),
    })
}

fn preview(v: &Value) -> String {
    let s = match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let mut out: String = s.chars().take(200).collect();
    if out.len() < s.len() {
        out.push_str("...");
    }
    out
}

/// One line per candidate, in retrieval order.
pub fn candidate_block(
    corpus: &Corpus,
    candidates: &CandidateList,
    evidence: &BTreeMap<ToolKey, EvidenceTuple>,
) -> String {
    let mut lines = Vec::new();
    for (i, c) in candidates.ranked.iter().enumerate() {
        let name = corpus.get(&c.tool_id).map(|t| t.name.as_str()).unwrap_or(&c.tool_id);
        let mut line = format!(
            "{}. [\"{}\", \"{}\"] tool name: {} | semantic score: {:.3}",
            i + 1,
            c.tool_id,
            c.api_name,
            name,
            c.fused_score
        );
        if let Some(e) = evidence.get(&c.key()) {
            line.push_str(&format!(" | status: {}", e.summary()));
            if e.status == TrialStatus::SuccessReal {
                line.push_str(&format!(" | latency: {} ms", e.metadata.latency_ms));
            }
            line.push_str(&format!(" | result: {}", preview(&e.result)));
        }
        lines.push(line);
    }
    lines.join("\n")
}

fn pair_strings(item: &Value) -> Option<(String, String)> {
    let text = |v: &Value| v.as_str().map(str::to_string);
    match item {
        Value::Array(a) if a.len() == 2 => Some((text(&a[0])?, text(&a[1])?)),
        Value::Object(o) => {
            let tool = o.get("tool").or_else(|| o.get("tool_id")).and_then(text)?;
            let api = o.get("api").or_else(|| o.get("api_name")).and_then(text)?;
            Some((tool, api))
        }
        _ => None,
    }
}

/// Interprets evaluator output against the candidate set. `None` when the
/// output is not a JSON list.
pub fn parse_evaluator_output(
    text: &str,
    corpus: &Corpus,
    allowed: &BTreeSet<ToolKey>,
) -> Option<(Vec<ToolKey>, Vec<String>)> {
    let Ok(Value::Array(items)) = parse_json_payload(text) else {
        return None;
    };
    let mut seen = BTreeSet::new();
    let mut order = Vec::new();
    let mut warnings = Vec::new();
    for item in &items {
        let Some((tool, api)) = pair_strings(item) else {
            warnings.push(format!("evaluator item {item} is not a [tool, api] pair; dropped"));
            continue;
        };
        let tool_id = corpus.resolve_tool(&tool).map(|t| t.tool_id.clone()).unwrap_or(tool);
        let key = ToolKey::new(tool_id, api);
        if !allowed.contains(&key) {
            warnings.push(format!("evaluator returned {key}, which is not a candidate; dropped"));
        } else if !seen.insert(key.clone()) {
            warnings.push(format!("evaluator returned {key} twice; later occurrence dropped"));
        } else {
            order.push(key);
        }
    }
    Some((order, warnings))
}

pub async fn rerank_llm(
    llm: &dyn LlmProvider,
    prompts: &PromptSet,
    corpus: &Corpus,
    query: &str,
    candidates: &CandidateList,
    evidence: &BTreeMap<ToolKey, EvidenceTuple>,
    latency_tiebreak: bool,
) -> Result<RankedOutcome, RerankError> {
    let fallback = rerank_deterministic(candidates, evidence, latency_tiebreak)?;
    let bindings = BTreeMap::from([
        ("query", query.to_string()),
        ("candidates", candidate_block(corpus, candidates, evidence)),
    ]);
    let prompt = match prompts.evaluator.render(&bindings) {
        Ok(p) => p,
        Err(e) => {
            return Ok(with_warning(
                fallback,
                format!("evaluator prompt: {e}; using deterministic order"),
            ))
        }
    };
    let out = llm
        .complete(&CompletionRequest::new(PromptRole::Evaluator, prompt))
        .await;
    if out.is_error() {
        tracing::warn!(query_id = %candidates.query_id, "evaluator failed: {}", out.text);
        return Ok(with_warning(
            fallback,
            format!("evaluator {}; using deterministic order", out.text),
        ));
    }
    let allowed: BTreeSet<ToolKey> = candidates.ranked.iter().map(Candidate::key).collect();
    let Some((order, mut warnings)) = parse_evaluator_output(&out.text, corpus, &allowed) else {
        tracing::warn!(query_id = %candidates.query_id, "evaluator output is not a JSON list");
        return Ok(with_warning(
            fallback,
            "evaluator output is not a JSON list; using deterministic order".into(),
        ));
    };
    for w in &warnings {
        tracing::warn!(query_id = %candidates.query_id, "{w}");
    }
    let mut ranked = Vec::with_capacity(fallback.ranked.len());
    for key in &order {
        let c = candidates.get(key).expect("allowed keys come from candidates");
        ranked.push(entry(c, &evidence[key], RankSource::Llm));
    }
    let chosen: BTreeSet<&ToolKey> = order.iter().collect();
    let omitted: Vec<RankedEntry> = fallback
        .ranked
        .into_iter()
        .filter(|e| !chosen.contains(&e.key()))
        .map(|mut e| {
            e.rank_source = RankSource::LlmFallback;
            e
        })
        .collect();
    if !omitted.is_empty() {
        warnings.push(format!(
            "{} candidate(s) omitted by the evaluator appended in evidence order",
            omitted.len()
        ));
    }
    ranked.extend(omitted);
    Ok(RankedOutcome {
        query_id: candidates.query_id.clone(),
        ranked,
        warnings,
    })
}

fn with_warning(mut outcome: RankedOutcome, warning: String) -> RankedOutcome {
    outcome.warnings.push(warning);
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::EvidenceMetadata;

    pub(crate) fn cand(tool: &str, fused: f64) -> Candidate {
        Candidate {
            tool_id: tool.into(),
            api_name: "run".into(),
            sparse_score: fused,
            sparse_norm: fused,
            dense_score: None,
            fused_score: fused,
        }
    }

    pub(crate) fn ev(status: TrialStatus, latency_ms: u64) -> EvidenceTuple {
        EvidenceTuple {
            status,
            result: Value::Null,
            metadata: EvidenceMetadata {
                latency_ms,
                ..Default::default()
            },
            transcript: Vec::new(),
        }
    }

    fn setup(rows: &[(&str, f64, TrialStatus, u64)]) -> (CandidateList, BTreeMap<ToolKey, EvidenceTuple>) {
        let ranked: Vec<Candidate> = rows.iter().map(|r| cand(r.0, r.1)).collect();
        let evidence = rows.iter().map(|r| (ToolKey::new(r.0, "run"), ev(r.2, r.3))).collect();
        (
            CandidateList {
                query_id: "q".into(),
                k: ranked.len(),
                ranked,
            },
            evidence,
        )
    }

    fn tools(o: &RankedOutcome) -> Vec<&str> {
        o.ranked.iter().map(|e| e.tool_id.as_str()).collect()
    }

    #[test]
    fn priority_classes() {
        let (c, e) = setup(&[
            ("a", 0.1, TrialStatus::SuccessReal, 0),
            ("b", 0.9, TrialStatus::PlanningFailed, 0),
            ("c", 0.5, TrialStatus::SuccessSimulated, 0),
        ]);
        assert_eq!(tools(&rerank_deterministic(&c, &e, false).unwrap()), ["a", "c", "b"]);
    }

    #[test]
    fn semantic_order_kept_within_class() {
        let (c, e) = setup(&[
            ("x", 0.9, TrialStatus::SuccessReal, 5),
            ("y", 0.5, TrialStatus::SuccessReal, 1),
            ("z", 0.2, TrialStatus::SuccessReal, 3),
        ]);
        assert_eq!(tools(&rerank_deterministic(&c, &e, false).unwrap()), ["x", "y", "z"]);
    }

    #[test]
    fn latency_tiebreak_inside_success_real() {
        let (c, e) = setup(&[
            ("slow", 0.9, TrialStatus::SuccessReal, 900),
            ("fast", 0.5, TrialStatus::SuccessReal, 120),
        ]);
        assert_eq!(tools(&rerank_deterministic(&c, &e, true).unwrap()), ["fast", "slow"]);
        assert_eq!(tools(&rerank_deterministic(&c, &e, false).unwrap()), ["slow", "fast"]);
    }

    #[test]
    fn equal_scores_break_on_key() {
        let (c, e) = setup(&[
            ("b", 0.5, TrialStatus::OtherNonerror, 0),
            ("a", 0.5, TrialStatus::OtherNonerror, 0),
        ]);
        assert_eq!(tools(&rerank_deterministic(&c, &e, false).unwrap()), ["a", "b"]);
    }

    #[test]
    fn missing_evidence_is_reported() {
        let (c, mut e) = setup(&[("a", 0.5, TrialStatus::SuccessReal, 0)]);
        e.clear();
        assert_eq!(
            rerank_deterministic(&c, &e, false),
            Err(RerankError::MissingEvidence(ToolKey::new("a", "run")))
        );
    }
}
