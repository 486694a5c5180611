//! Stage orchestration and artifacts.
//!
//! Each stage reads the previous stage's artifact from the output directory
//! and writes its own. Every record carries the config digest; reading an
//! artifact written under a different digest is an error. The full pipeline
//! is exactly the stages run in order.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use url::Url;

use crate::config::{ConfigError, LlmMode, RunConfig};
use crate::corpus::{load_corpus, load_queries, Corpus, LoadOptions, QueryRecord, ToolKey};
use crate::eval::{evaluate, EvidenceByQuery, MethodRun, MetricsReport};
use crate::llm::{HttpProvider, HttpProviderConfig, LlmProvider, PromptSet, ScriptedProvider};
use crate::rerank::{rerank_deterministic, rerank_llm, RankedOutcome, RerankMode};
use crate::retriever::{document_text, fuse, Bm25Index, Candidate, CandidateList, EmbeddingClient};
use crate::sandbox::{classify, serve_mock, Allowlist, FailureClass, MockScenario, MockServer, Sandbox, SandboxConfig};
use crate::trial::{EvidenceTuple, TrialRunner};

pub const INGEST_FILE: &str = "ingest.json";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const EVIDENCE_FILE: &str = "evidence.jsonl";
pub const RERANKED_FILE: &str = "reranked.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";

pub const BASE_METHOD: &str = "base";
pub const GRETEL_METHOD: &str = "gretel";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Runtime => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineError {
    pub kind: ErrorKind,
    pub stage: &'static str,
    pub query_id: Option<String>,
    pub message: String,
}

impl PipelineError {
    pub fn new(kind: ErrorKind, stage: &'static str, message: impl fmt::Display) -> Self {
        Self {
            kind,
            stage,
            query_id: None,
            message: message.to_string(),
        }
    }

    pub fn for_query(mut self, query_id: &str) -> Self {
        self.query_id = Some(query_id.to_string());
        self
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.stage)?;
        if let Some(q) = &self.query_id {
            write!(f, " [query {q}]")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for PipelineError {}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::new(ErrorKind::Config, "config", e)
    }
}

/// Artifacts that carry a config digest.
pub trait Stamped {
    fn digest(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub config_digest: String,
    pub tool_count: usize,
    pub api_count: usize,
    pub query_count: usize,
    pub labeled_queries: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub config_digest: String,
    pub query_id: String,
    pub query: String,
    pub k: usize,
    pub ranked: Vec<Candidate>,
}

impl CandidateRecord {
    pub fn list(&self) -> CandidateList {
        CandidateList {
            query_id: self.query_id.clone(),
            ranked: self.ranked.clone(),
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub config_digest: String,
    pub query_id: String,
    pub tool_id: String,
    pub api_name: String,
    pub failure_class: FailureClass,
    pub evidence: EvidenceTuple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    pub config_digest: String,
    #[serde(flatten)]
    pub outcome: RankedOutcome,
}

impl Stamped for IngestSummary {
    fn digest(&self) -> &str {
        &self.config_digest
    }
}
impl Stamped for CandidateRecord {
    fn digest(&self) -> &str {
        &self.config_digest
    }
}
impl Stamped for EvidenceRecord {
    fn digest(&self) -> &str {
        &self.config_digest
    }
}
impl Stamped for RerankRecord {
    fn digest(&self) -> &str {
        &self.config_digest
    }
}

/// Evidence records regrouped per query.
pub fn group_evidence(records: &[EvidenceRecord]) -> EvidenceByQuery {
    let mut out = EvidenceByQuery::new();
    for r in records {
        out.entry(r.query_id.clone())
            .or_default()
            .insert(ToolKey::new(&r.tool_id, &r.api_name), r.evidence.clone());
    }
    out
}

pub struct Pipeline {
    pub config: RunConfig,
    pub digest: String,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        let digest = config
            .digest()
            .map_err(|e| PipelineError::new(ErrorKind::Data, "config", e))?;
        Ok(Self { config, digest })
    }

    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        Self::new(RunConfig::load(path)?)
    }

    pub fn output_path(&self, file: &str) -> PathBuf {
        self.config.paths.output_dir.join(file)
    }

    fn opts(&self) -> LoadOptions {
        LoadOptions {
            permissive: self.config.ingest.permissive,
        }
    }

    pub fn load_corpus(&self, stage: &'static str) -> Result<Corpus, PipelineError> {
        load_corpus(&self.config.paths.tools, self.opts()).map_err(|e| PipelineError::new(ErrorKind::Data, stage, e))
    }

    pub fn load_queries(&self, stage: &'static str, corpus: &Corpus) -> Result<Vec<QueryRecord>, PipelineError> {
        load_queries(&self.config.paths.queries, corpus, self.opts())
            .map(|set| set.queries)
            .map_err(|e| PipelineError::new(ErrorKind::Data, stage, e))
    }

    fn write(&self, stage: &'static str, file: &str, contents: &str) -> Result<(), PipelineError> {
        let dir = &self.config.paths.output_dir;
        fs::create_dir_all(dir)
            .and_then(|_| fs::write(dir.join(file), contents))
            .map_err(|e| PipelineError::new(ErrorKind::Runtime, stage, format!("cannot write {file}: {e}")))
    }

    fn write_jsonl<T: Serialize>(&self, stage: &'static str, file: &str, records: &[T]) -> Result<(), PipelineError> {
        let mut text = String::new();
        for r in records {
            text.push_str(&serde_json::to_string(r).expect("record serializes"));
            text.push('\n');
        }
        self.write(stage, file, &text)
    }

    fn check_digest(&self, stage: &'static str, file: &str, found: &str) -> Result<(), PipelineError> {
        if found != self.digest {
            return Err(PipelineError::new(
                ErrorKind::Data,
                stage,
                format!(
                    "{file} was produced under config digest {found}, but the current config digest is {}; rerun the upstream stages",
                    self.digest
                ),
            ));
        }
        Ok(())
    }

    /// Reads an upstream artifact; `Ok(None)` when absent and optional.
    fn read_jsonl<T: DeserializeOwned + Stamped>(
        &self,
        stage: &'static str,
        file: &str,
        required: bool,
    ) -> Result<Option<Vec<T>>, PipelineError> {
        let path = self.output_path(file);
        if !path.exists() {
            if required {
                return Err(PipelineError::new(
                    ErrorKind::Data,
                    stage,
                    format!("missing upstream artifact {}", path.display()),
                ));
            }
            return Ok(None);
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| PipelineError::new(ErrorKind::Data, stage, format!("cannot read {}: {e}", path.display())))?;
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: T = serde_json::from_str(line)
                .map_err(|e| PipelineError::new(ErrorKind::Data, stage, format!("{file} line {}: {e}", i + 1)))?;
            self.check_digest(stage, file, rec.digest())?;
            out.push(rec);
        }
        Ok(Some(out))
    }

    fn build_llm(&self, stage: &'static str) -> Result<Arc<dyn LlmProvider>, PipelineError> {
        let cfg = &self.config.llm;
        match cfg.mode {
            LlmMode::Scripted => {
                let path = cfg.script_path.as_ref().expect("validated");
                let p = ScriptedProvider::load(path).map_err(|e| PipelineError::new(ErrorKind::Config, stage, e))?;
                Ok(Arc::new(p))
            }
            LlmMode::Http => {
                let p = HttpProvider::new(HttpProviderConfig {
                    endpoint: cfg.endpoint.clone().expect("validated"),
                    model: cfg.model.clone().expect("validated"),
                    token: std::env::var(&cfg.token_env).ok(),
                    timeout: Duration::from_millis(cfg.timeout_ms),
                    max_in_flight: cfg.max_in_flight,
                })
                .map_err(|e| PipelineError::new(ErrorKind::Config, stage, e))?;
                Ok(Arc::new(p))
            }
        }
    }

    fn build_prompts(&self, stage: &'static str) -> Result<PromptSet, PipelineError> {
        match &self.config.llm.prompts_dir {
            Some(dir) => PromptSet::from_dir(dir).map_err(|e| PipelineError::new(ErrorKind::Config, stage, e)),
            None => Ok(PromptSet::default()),
        }
    }

    /// Sandbox for the trial stage. With a scenario configured, an embedded
    /// mock server is started and becomes the base URL.
    async fn build_sandbox(&self, corpus: &Corpus) -> Result<(Sandbox, Option<MockServer>), PipelineError> {
        let stage = "trial";
        let sb = &self.config.sandbox;
        let mut allowlist = Allowlist::new(sb.allowlist.iter());
        if let Ok(extra) = std::env::var("GRETEL_ALLOWLIST") {
            allowlist.extend(&Allowlist::parse(&extra));
        }
        let mut base_url =
            match &sb.base_url {
                Some(u) => Some(Url::parse(u).map_err(|e| {
                    PipelineError::new(ErrorKind::Config, stage, format!("sandbox.base_url `{u}`: {e}"))
                })?),
                None => None,
            };
        let mut mock = None;
        if let Some(path) = &self.config.paths.scenario {
            let scenario = MockScenario::load(path).map_err(|e| PipelineError::new(ErrorKind::Data, stage, e))?;
            let server = serve_mock(&scenario, corpus, SocketAddr::from(([127, 0, 0, 1], 0)))
                .await
                .map_err(|e| PipelineError::new(ErrorKind::Runtime, stage, e))?;
            allowlist.insert(&server.addr().to_string());
            base_url = Some(Url::parse(&server.base_url()).expect("mock base url parses"));
            mock = Some(server);
        }
        let sandbox = Sandbox::new(SandboxConfig {
            allowlist,
            base_url,
            response_cap_bytes: sb.response_cap_bytes,
            bearer_tokens: BTreeMap::new(),
        })
        .map_err(|e| PipelineError::new(ErrorKind::Runtime, stage, e))?;
        Ok((sandbox, mock))
    }

    pub fn ingest(&self) -> Result<IngestSummary, PipelineError> {
        let corpus = self.load_corpus("ingest")?;
        let set = load_queries(&self.config.paths.queries, &corpus, self.opts())
            .map_err(|e| PipelineError::new(ErrorKind::Data, "ingest", e))?;
        let mut warnings = corpus.warnings.clone();
        warnings.extend(set.warnings);
        let summary = IngestSummary {
            config_digest: self.digest.clone(),
            tool_count: corpus.len(),
            api_count: corpus.api_count(),
            query_count: set.queries.len(),
            labeled_queries: set.queries.iter().filter(|q| !q.relevant.is_empty()).count(),
            warnings,
        };
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        self.write("ingest", INGEST_FILE, &format!("{text}\n"))?;
        Ok(summary)
    }

    pub async fn retrieve(&self) -> Result<Vec<CandidateRecord>, PipelineError> {
        let stage = "retrieve";
        let ingest = self.output_path(INGEST_FILE);
        if ingest.exists() {
            let text = fs::read_to_string(&ingest).map_err(|e| {
                PipelineError::new(ErrorKind::Data, stage, format!("cannot read {}: {e}", ingest.display()))
            })?;
            let summary: IngestSummary = serde_json::from_str(&text)
                .map_err(|e| PipelineError::new(ErrorKind::Data, stage, format!("{INGEST_FILE}: {e}")))?;
            self.check_digest(stage, INGEST_FILE, &summary.config_digest)?;
        }
        let corpus = self.load_corpus(stage)?;
        let queries = self.load_queries(stage, &corpus)?;
        let rcfg = &self.config.retriever;
        let index =
            Bm25Index::build(&corpus, rcfg.bm25()).map_err(|e| PipelineError::new(ErrorKind::Data, stage, e))?;
        let dense = match (&rcfg.embedding_endpoint, rcfg.alpha > 0.0) {
            (Some(url), true) => Some(
                EmbeddingClient::new(url.clone(), Duration::from_millis(self.config.llm.timeout_ms))
                    .map_err(|e| PipelineError::new(ErrorKind::Config, stage, e))?,
            ),
            _ => None,
        };
        let mut records = Vec::with_capacity(queries.len());
        for q in &queries {
            let mut list = index
                .retrieve(&q.query_id, &q.text, rcfg.top_k)
                .map_err(|e| PipelineError::new(ErrorKind::Data, stage, e).for_query(&q.query_id))?;
            if let Some(client) = &dense {
                let docs: Vec<(ToolKey, String)> = list
                    .ranked
                    .iter()
                    .map(|c| {
                        let (tool, api) = corpus.api(&c.key()).expect("candidates come from the corpus");
                        (c.key(), document_text(&tool.name, &tool.description, &api.description))
                    })
                    .collect();
                let scores = client
                    .dense_scores(&q.text, &docs)
                    .await
                    .map_err(|e| PipelineError::new(ErrorKind::Runtime, stage, e).for_query(&q.query_id))?;
                list = fuse(&list, &scores, rcfg.alpha)
                    .map_err(|e| PipelineError::new(ErrorKind::Runtime, stage, e).for_query(&q.query_id))?;
            }
            records.push(CandidateRecord {
                config_digest: self.digest.clone(),
                query_id: q.query_id.clone(),
                query: q.text.clone(),
                k: list.k,
                ranked: list.ranked,
            });
        }
        self.write_jsonl(stage, CANDIDATES_FILE, &records)?;
        Ok(records)
    }

    pub async fn trial(&self) -> Result<Vec<EvidenceRecord>, PipelineError> {
        let stage = "trial";
        let candidates: Vec<CandidateRecord> = self.read_jsonl(stage, CANDIDATES_FILE, true)?.expect("required");
        let corpus = self.load_corpus(stage)?;
        let llm = self.build_llm(stage)?;
        let prompts = Arc::new(self.build_prompts(stage)?);
        let (sandbox, mock) = self.build_sandbox(&corpus).await?;
        let runner = TrialRunner::new(llm, prompts, sandbox, self.config.trial.clone());
        let mut records = Vec::new();
        let mut failure = None;
        for rec in &candidates {
            if rec.ranked.is_empty() {
                continue;
            }
            let evidence = match runner.run_all_trials(&rec.query, &rec.list(), &corpus).await {
                Ok(e) => e,
                Err(e) => {
                    failure = Some(PipelineError::new(ErrorKind::Data, stage, e).for_query(&rec.query_id));
                    break;
                }
            };
            for c in &rec.ranked {
                let e = &evidence[&c.key()];
                records.push(EvidenceRecord {
                    config_digest: self.digest.clone(),
                    query_id: rec.query_id.clone(),
                    tool_id: c.tool_id.clone(),
                    api_name: c.api_name.clone(),
                    failure_class: classify(e),
                    evidence: e.clone(),
                });
            }
        }
        if let Some(server) = mock {
            server.shutdown().await;
        }
        if let Some(e) = failure {
            return Err(e);
        }
        self.write_jsonl(stage, EVIDENCE_FILE, &records)?;
        Ok(records)
    }

    pub async fn rerank(&self) -> Result<Vec<RerankRecord>, PipelineError> {
        let stage = "rerank";
        let candidates: Vec<CandidateRecord> = self.read_jsonl(stage, CANDIDATES_FILE, true)?.expect("required");
        let evidence: Vec<EvidenceRecord> = self.read_jsonl(stage, EVIDENCE_FILE, true)?.expect("required");
        let evidence = group_evidence(&evidence);
        let rcfg = &self.config.rerank;
        let llm_parts = match rcfg.mode {
            RerankMode::Llm => Some((
                self.build_llm(stage)?,
                self.build_prompts(stage)?,
                self.load_corpus(stage)?,
            )),
            RerankMode::Deterministic => None,
        };
        let empty = BTreeMap::new();
        let mut records = Vec::with_capacity(candidates.len());
        for rec in &candidates {
            let ev = evidence.get(&rec.query_id).unwrap_or(&empty);
            let list = rec.list();
            let outcome = if list.ranked.is_empty() {
                RankedOutcome {
                    query_id: rec.query_id.clone(),
                    ranked: Vec::new(),
                    warnings: Vec::new(),
                }
            } else {
                let result = match &llm_parts {
                    Some((llm, prompts, corpus)) => {
                        rerank_llm(
                            llm.as_ref(),
                            prompts,
                            corpus,
                            &rec.query,
                            &list,
                            ev,
                            rcfg.latency_tiebreak,
                        )
                        .await
                    }
                    None => rerank_deterministic(&list, ev, rcfg.latency_tiebreak),
                };
                result.map_err(|e| PipelineError::new(ErrorKind::Data, stage, e).for_query(&rec.query_id))?
            };
            records.push(RerankRecord {
                config_digest: self.digest.clone(),
                outcome,
            });
        }
        self.write_jsonl(stage, RERANKED_FILE, &records)?;
        Ok(records)
    }

    pub fn eval(&self) -> Result<MetricsReport, PipelineError> {
        let stage = "eval";
        let candidates: Vec<CandidateRecord> = self.read_jsonl(stage, CANDIDATES_FILE, true)?.expect("required");
        let reranked: Option<Vec<RerankRecord>> = self.read_jsonl(stage, RERANKED_FILE, false)?;
        let evidence: Option<Vec<EvidenceRecord>> = self.read_jsonl(stage, EVIDENCE_FILE, false)?;
        let corpus = self.load_corpus(stage)?;
        let queries = self.load_queries(stage, &corpus)?;

        let mut methods = vec![MethodRun {
            name: BASE_METHOD.into(),
            rankings: candidates
                .iter()
                .map(|r| (r.query_id.clone(), r.ranked.iter().map(Candidate::key).collect()))
                .collect(),
        }];
        if let Some(rr) = &reranked {
            methods.push(MethodRun {
                name: GRETEL_METHOD.into(),
                rankings: rr
                    .iter()
                    .map(|r| (r.outcome.query_id.clone(), r.outcome.keys()))
                    .collect(),
            });
        }
        let grouped = evidence.as_deref().map(group_evidence);
        let report = evaluate(&methods, &queries, grouped.as_ref(), &self.config.eval, &self.digest)
            .map_err(|e| PipelineError::new(ErrorKind::Data, stage, e))?;
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        self.write(stage, REPORT_JSON_FILE, &format!("{json}\n"))?;
        self.write(stage, REPORT_CSV_FILE, &report.to_csv())?;
        Ok(report)
    }

    /// All stages in order.
    pub async fn run(&self) -> Result<MetricsReport, PipelineError> {
        self.ingest()?;
        self.retrieve().await?;
        self.trial().await?;
        self.rerank().await?;
        self.eval()
    }
}
