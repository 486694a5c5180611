//! Tool retrieval that validates candidates by running them.
//!
//! The pipeline retrieves candidate APIs with BM25 (optionally fused with a
//! dense score), runs a plan/execute/simulate trial for each candidate,
//! re-ranks on the resulting evidence and scores the result against labels.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod llm;
pub mod pipeline;
pub mod rerank;
pub mod retriever;
pub mod sandbox;
pub mod synth;
pub mod trial;

pub use config::RunConfig;
pub use corpus::{ApiSpec, Corpus, ParamKind, QueryRecord, ToolKey, ToolSpec};
pub use eval::{evaluate, MetricsReport};
pub use pipeline::{Pipeline, PipelineError};
pub use rerank::{rerank_deterministic, rerank_llm, RankedOutcome};
pub use retriever::{Candidate, CandidateList};
pub use sandbox::{classify, ExecutionResult, FailureClass};
pub use trial::{EvidenceTuple, PlannedCall, TrialConfig, TrialRunner, TrialStatus};
