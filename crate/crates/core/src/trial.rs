//! Trial-based evidence generation.
//!
//! Each candidate gets one trial: the planner LLM builds a call from the
//! query and the API spec, the sandbox executes it for real, and when the
//! real call errors the simulator LLM may produce a plausible response. The
//! outcome is an [`EvidenceTuple`]:
//!
//! | plan   | execute  | simulate          | status              | simulation_used |
//! |--------|----------|-------------------|---------------------|-----------------|
//! | failed | -        | -                 | `PLANNING_FAILED`   | false           |
//! | ok     | success  | -                 | `SUCCESS_REAL`      | false           |
//! | ok     | error    | ok                | `SUCCESS_SIMULATED` | true            |
//! | ok     | error    | failed            | `SIMULATION_FAILED` | true            |
//! | ok     | error    | disabled          | `SIMULATION_FAILED` | false           |
//! | ok     | empty    | -                 | `OTHER_NONERROR`    | false           |
//!
//! A trial that exceeds its wall-clock budget ends as `SIMULATION_FAILED`
//! tagged `trial_timeout`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;
use tokio::time::timeout_at;

use crate::corpus::{ApiSpec, Corpus, ParamKind, ToolKey, ToolSpec};
use crate::llm::{describe_api, parse_json_payload, CompletionRequest, LlmProvider, PromptRole, PromptSet};
use crate::retriever::CandidateList;
use crate::sandbox::{ErrorClass, ExecStatus, ExecutionResult, Sandbox};

/// A validated call ready for execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedCall {
    pub tool_id: String,
    pub api_name: String,
    pub bindings: BTreeMap<String, Value>,
    /// Canonical `tool.api(name=value,...)` form, names sorted.
    pub formatted: String,
}

pub fn format_call(tool_id: &str, api_name: &str, bindings: &BTreeMap<String, Value>) -> String {
    let args = bindings
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(",");
    format!("{tool_id}.{api_name}({args})")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("provider_error: {0}")]
    Provider(String),
    #[error("invalid_json: {0}")]
    InvalidJson(String),
    #[error("not_an_object: planner returned {0}")]
    NotAnObject(String),
    #[error("planner_declined: {0}")]
    Declined(String),
    #[error("unknown_parameter: {}", .0.join(", "))]
    UnknownParams(Vec<String>),
    #[error("missing_required: {}", .0.join(", "))]
    MissingRequired(Vec<String>),
    #[error("kind_mismatch: `{name}` expects {expected}, got {got}")]
    KindMismatch {
        name: String,
        expected: ParamKind,
        got: String,
    },
}

fn coerce(kind: ParamKind, value: Value) -> Result<Value, Value> {
    match (kind, value) {
        (ParamKind::String, v @ Value::String(_)) => Ok(v),
        (ParamKind::Boolean, v @ Value::Bool(_)) => Ok(v),
        (ParamKind::Array, v @ Value::Array(_)) => Ok(v),
        (ParamKind::Object, v @ Value::Object(_)) => Ok(v),
        (ParamKind::Number, v @ Value::Number(_)) => Ok(v),
        (ParamKind::Integer, Value::Number(n)) => {
            if n.is_i64() || n.is_u64() {
                Ok(Value::Number(n))
            } else {
                integral(n.as_f64()).ok_or(Value::Number(n))
            }
        }
        (ParamKind::Integer, Value::String(s)) => {
            let t = s.trim();
            if let Ok(i) = t.parse::<i64>() {
                Ok(Value::from(i))
            } else {
                t.parse::<f64>()
                    .ok()
                    .and_then(|f| integral(Some(f)))
                    .ok_or(Value::String(s))
            }
        }
        (ParamKind::Number, Value::String(s)) => match s.trim().parse::<f64>().ok().and_then(Number::from_f64) {
            Some(n) => Ok(Value::Number(n)),
            None => Err(Value::String(s)),
        },
        (_, v) => Err(v),
    }
}

fn integral(f: Option<f64>) -> Option<Value> {
    let f = f?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then(|| Value::from(f as i64))
}

/// Checks a planner answer against the API spec. Null values count as
/// absent; numeric strings coerce to integer/number kinds.
pub fn validate_bindings(api: &ApiSpec, raw: Map<String, Value>) -> Result<BTreeMap<String, Value>, PlanError> {
    if raw.len() == 1 && api.param("error").is_none() {
        if let Some(reason) = raw.get("error") {
            let reason = match reason {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            return Err(PlanError::Declined(reason));
        }
    }
    let raw: Vec<(String, Value)> = raw.into_iter().filter(|(_, v)| !v.is_null()).collect();
    let unknown: Vec<String> = raw
        .iter()
        .filter(|(k, _)| api.param(k).is_none())
        .map(|(k, _)| k.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(PlanError::UnknownParams(unknown));
    }
    let missing: Vec<String> = api
        .required_params()
        .filter(|p| !raw.iter().any(|(k, _)| *k == p.name))
        .map(|p| p.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(PlanError::MissingRequired(missing));
    }
    let mut out = BTreeMap::new();
    for (name, value) in raw {
        let kind = api.param(&name).expect("checked above").kind;
        match coerce(kind, value) {
            Ok(v) => {
                out.insert(name, v);
            }
            Err(v) => {
                return Err(PlanError::KindMismatch {
                    name,
                    expected: kind,
                    got: v.to_string(),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrialStatus {
    PlanningFailed,
    SuccessReal,
    SuccessSimulated,
    SimulationFailed,
    OtherNonerror,
}

impl TrialStatus {
    pub const ALL: [TrialStatus; 5] = [
        TrialStatus::SuccessReal,
        TrialStatus::SuccessSimulated,
        TrialStatus::OtherNonerror,
        TrialStatus::SimulationFailed,
        TrialStatus::PlanningFailed,
    ];

    pub fn is_success(self) -> bool {
        matches!(self, TrialStatus::SuccessReal | TrialStatus::SuccessSimulated)
    }
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialStatus::PlanningFailed => "PLANNING_FAILED",
            TrialStatus::SuccessReal => "SUCCESS_REAL",
            TrialStatus::SuccessSimulated => "SUCCESS_SIMULATED",
            TrialStatus::SimulationFailed => "SIMULATION_FAILED",
            TrialStatus::OtherNonerror => "OTHER_NONERROR",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Plan,
    Execute,
    Simulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    /// Offset from trial start.
    pub at_ms: u64,
    pub elapsed_ms: u64,
    pub outcome: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceMetadata {
    pub simulation_used: bool,
    /// Latency of the real call; 0 when nothing was executed.
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    /// Sub-cause such as `missing_required`, `simulation_disabled` or
    /// `trial_timeout`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTuple {
    pub status: TrialStatus,
    /// Response payload (real or simulated) or an error message.
    pub result: Value,
    pub metadata: EvidenceMetadata,
    pub transcript: Vec<StageRecord>,
}

impl EvidenceTuple {
    /// Equality ignoring wall-clock fields (latency, stage timings).
    pub fn same_outcome(&self, other: &EvidenceTuple) -> bool {
        let strip = |e: &EvidenceTuple| {
            let mut e = e.clone();
            e.metadata.latency_ms = 0;
            e.metadata.cached = false;
            for s in &mut e.transcript {
                s.at_ms = 0;
                s.elapsed_ms = 0;
            }
            e
        };
        strip(self) == strip(other)
    }

    pub fn has_stage(&self, stage: Stage) -> bool {
        self.transcript.iter().any(|s| s.stage == stage)
    }

    /// Short description used in re-ranking prompts and artifacts.
    pub fn summary(&self) -> String {
        let mut s = self.status.to_string();
        if let Some(code) = self.metadata.http_status {
            s.push_str(&format!(" http={code}"));
        }
        if let Some(class) = self.metadata.error_class {
            s.push_str(&format!(" error={class}"));
        }
        if let Some(tag) = &self.metadata.tag {
            s.push_str(&format!(" ({tag})"));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrialConfig {
    pub timeout_ms: u64,
    pub max_concurrency: usize,
    pub simulation_enabled: bool,
    pub cache_planned_calls: bool,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            timeout_ms: 10_000,
            max_concurrency: 4,
            simulation_enabled: true,
            cache_planned_calls: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("no candidates")]
    NoCandidates,
    #[error("candidate {0} is not in the corpus")]
    UnknownCandidate(ToolKey),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimulationError {
    #[error("provider_error: {0}")]
    Provider(String),
    #[error("invalid_json: {0}")]
    InvalidJson(String),
}

/// Per-query cache of execution results keyed by formatted call.
pub type CallCache = Mutex<HashMap<String, ExecutionResult>>;

/// Runs trials. Cheap to clone; clones share providers and the sandbox.
#[derive(Clone)]
pub struct TrialRunner {
    llm: Arc<dyn LlmProvider>,
    prompts: Arc<PromptSet>,
    sandbox: Sandbox,
    config: TrialConfig,
}

struct Transcript {
    start: Instant,
    records: Vec<StageRecord>,
}

impl Transcript {
    fn new() -> Self {
        Self {
            start: Instant::now(),
            records: Vec::new(),
        }
    }

    fn push(&mut self, stage: Stage, began: Instant, outcome: impl Into<String>) {
        self.records.push(StageRecord {
            stage,
            at_ms: began.duration_since(self.start).as_millis() as u64,
            elapsed_ms: began.elapsed().as_millis() as u64,
            outcome: outcome.into(),
        });
    }
}

impl TrialRunner {
    pub fn new(llm: Arc<dyn LlmProvider>, prompts: Arc<PromptSet>, sandbox: Sandbox, config: TrialConfig) -> Self {
        Self {
            llm,
            prompts,
            sandbox,
            config,
        }
    }

    pub fn config(&self) -> &TrialConfig {
        &self.config
    }

    pub fn sandbox(&self) -> &Sandbox {
        &self.sandbox
    }

    /// Asks the planner for parameter values and validates them.
    pub async fn plan(&self, query: &str, tool: &ToolSpec, api: &ApiSpec) -> Result<PlannedCall, PlanError> {
        let bindings = BTreeMap::from([("query", query.to_string()), ("api_spec", describe_api(tool, api))]);
        let prompt = self
            .prompts
            .planner
            .render(&bindings)
            .map_err(|e| PlanError::Provider(e.to_string()))?;
        let out = self
            .llm
            .complete(&CompletionRequest::new(PromptRole::Planner, prompt))
            .await;
        if out.is_error() {
            return Err(PlanError::Provider(out.text));
        }
        let value = parse_json_payload(&out.text).map_err(|e| PlanError::InvalidJson(e.reason))?;
        let Value::Object(map) = value else {
            return Err(PlanError::NotAnObject(value.to_string()));
        };
        let bindings = validate_bindings(api, map)?;
        Ok(PlannedCall {
            formatted: format_call(&tool.tool_id, &api.api_name, &bindings),
            tool_id: tool.tool_id.clone(),
            api_name: api.api_name.clone(),
            bindings,
        })
    }

    /// Asks the simulator for the response a working call would have given.
    pub async fn simulate(
        &self,
        query: &str,
        tool: &ToolSpec,
        api: &ApiSpec,
        call: &PlannedCall,
        failure: &ExecutionResult,
    ) -> Result<Value, SimulationError> {
        let bindings = BTreeMap::from([
            ("query", query.to_string()),
            ("api_call", call.formatted.clone()),
            ("api_spec", describe_api(tool, api)),
            ("failure", failure.describe()),
        ]);
        let prompt = self
            .prompts
            .simulator
            .render(&bindings)
            .map_err(|e| SimulationError::Provider(e.to_string()))?;
        let out = self
            .llm
            .complete(&CompletionRequest::new(PromptRole::Simulator, prompt))
            .await;
        if out.is_error() {
            return Err(SimulationError::Provider(out.text));
        }
        parse_json_payload(&out.text).map_err(|e| SimulationError::InvalidJson(e.reason))
    }

    async fn execute_cached(
        &self,
        call: &PlannedCall,
        api: &ApiSpec,
        deadline: Instant,
        cache: Option<&CallCache>,
    ) -> (ExecutionResult, bool) {
        if let Some(hit) = cache.and_then(|c| c.lock().expect("call cache").get(&call.formatted).cloned()) {
            return (hit, true);
        }
        let remaining = deadline.saturating_duration_since(Instant::now());
        let result = match self.sandbox.execute(call, api, remaining).await {
            Ok(r) => r,
            Err(e) => ExecutionResult::error(ErrorClass::Connection, format!("refused: {e}"), 0),
        };
        if let Some(c) = cache {
            c.lock()
                .expect("call cache")
                .insert(call.formatted.clone(), result.clone());
        }
        (result, false)
    }

    fn timed_out(transcript: Transcript, mut metadata: EvidenceMetadata) -> EvidenceTuple {
        let simulated = transcript.records.iter().any(|r| r.stage == Stage::Simulate);
        metadata.simulation_used = simulated;
        metadata.tag = Some("trial_timeout".into());
        EvidenceTuple {
            status: TrialStatus::SimulationFailed,
            result: Value::String("trial exceeded its time budget".into()),
            metadata,
            transcript: transcript.records,
        }
    }

    /// One full trial for one candidate. Never fails: every outcome is
    /// encoded in the returned tuple.
    pub async fn run_trial(
        &self,
        query: &str,
        tool: &ToolSpec,
        api: &ApiSpec,
        cache: Option<&CallCache>,
    ) -> EvidenceTuple {
        let mut transcript = Transcript::new();
        let deadline = transcript.start + Duration::from_millis(self.config.timeout_ms);
        let tokio_deadline = tokio::time::Instant::from_std(deadline);
        let mut metadata = EvidenceMetadata::default();

        let began = Instant::now();
        let call = match timeout_at(tokio_deadline, self.plan(query, tool, api)).await {
            Err(_) => {
                transcript.push(Stage::Plan, began, "timeout");
                return Self::timed_out(transcript, metadata);
            }
            Ok(Err(e)) => {
                let msg = e.to_string();
                transcript.push(Stage::Plan, began, format!("failed: {msg}"));
                metadata.tag = msg.split(':').next().map(str::to_string);
                return EvidenceTuple {
                    status: TrialStatus::PlanningFailed,
                    result: Value::String(msg),
                    metadata,
                    transcript: transcript.records,
                };
            }
            Ok(Ok(call)) => {
                transcript.push(Stage::Plan, began, format!("ok: {}", call.formatted));
                call
            }
        };

        let began = Instant::now();
        let (exec, cached) = match timeout_at(tokio_deadline, self.execute_cached(&call, api, deadline, cache)).await {
            Ok(r) => r,
            Err(_) => {
                transcript.push(Stage::Execute, began, "timeout");
                return Self::timed_out(transcript, metadata);
            }
        };
        transcript.push(Stage::Execute, began, exec.describe());
        if Instant::now() >= deadline {
            // the call's own timeout fired at the trial deadline
            return Self::timed_out(transcript, metadata);
        }
        metadata.latency_ms = exec.latency_ms;
        metadata.http_status = exec.http_status;
        metadata.error_class = exec.error_class;
        metadata.cached = cached;

        match exec.status {
            ExecStatus::Success => EvidenceTuple {
                status: TrialStatus::SuccessReal,
                result: exec.payload.unwrap_or(Value::Null),
                metadata,
                transcript: transcript.records,
            },
            ExecStatus::Error if !self.config.simulation_enabled => {
                metadata.tag = Some("simulation_disabled".into());
                EvidenceTuple {
                    status: TrialStatus::SimulationFailed,
                    result: Value::String(exec.describe()),
                    metadata,
                    transcript: transcript.records,
                }
            }
            ExecStatus::Error => {
                let began = Instant::now();
                let simulated = timeout_at(tokio_deadline, self.simulate(query, tool, api, &call, &exec)).await;
                metadata.simulation_used = true;
                match simulated {
                    Err(_) => {
                        transcript.push(Stage::Simulate, began, "timeout");
                        Self::timed_out(transcript, metadata)
                    }
                    Ok(Ok(value)) => {
                        transcript.push(Stage::Simulate, began, "ok");
                        EvidenceTuple {
                            status: TrialStatus::SuccessSimulated,
                            result: value,
                            metadata,
                            transcript: transcript.records,
                        }
                    }
                    Ok(Err(e)) => {
                        let msg = e.to_string();
                        transcript.push(Stage::Simulate, began, format!("failed: {msg}"));
                        metadata.tag = Some(format!("simulation_failed: {}", msg.split(':').next().unwrap_or("")));
                        EvidenceTuple {
                            status: TrialStatus::SimulationFailed,
                            result: Value::String(format!("{}; simulation {msg}", exec.describe())),
                            metadata,
                            transcript: transcript.records,
                        }
                    }
                }
            }
            ExecStatus::Empty => EvidenceTuple {
                status: TrialStatus::OtherNonerror,
                result: exec.payload.unwrap_or(Value::Null),
                metadata,
                transcript: transcript.records,
            },
        }
    }

    /// Trials every candidate under a bounded worker pool. The map is
    /// assembled by key, so completion order does not matter.
    pub async fn run_all_trials(
        &self,
        query: &str,
        candidates: &CandidateList,
        corpus: &Corpus,
    ) -> Result<BTreeMap<ToolKey, EvidenceTuple>, TrialError> {
        if candidates.ranked.is_empty() {
            return Err(TrialError::NoCandidates);
        }
        let mut jobs = Vec::with_capacity(candidates.ranked.len());
        for c in &candidates.ranked {
            let key = c.key();
            let (tool, api) = corpus
                .api(&key)
                .ok_or_else(|| TrialError::UnknownCandidate(key.clone()))?;
            jobs.push((key, tool, api));
        }
        let cache: Option<CallCache> = self.config.cache_planned_calls.then(CallCache::default);
        let cache = cache.as_ref();
        let results: Vec<(ToolKey, EvidenceTuple)> = stream::iter(jobs)
            .map(|(key, tool, api)| async move { (key, self.run_trial(query, tool, api, cache).await) })
            .buffer_unordered(self.config.max_concurrency.max(1))
            .collect()
            .await;
        Ok(results.into_iter().collect())
    }
}
