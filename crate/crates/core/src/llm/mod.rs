//! Language-model access for the planner, simulator and evaluator roles.
//!
//! Two providers implement [`LlmProvider`]: a scripted table for offline and
//! test runs, and an HTTP client for chat-completion endpoints. Provider
//! failures come back as [`FinishReason::ProviderError`], never as panics.

mod http;
mod payload;
mod scripted;
mod template;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

pub use http::{HttpProvider, HttpProviderConfig};
pub use payload::{parse_json_payload, InvalidJson};
pub use scripted::{prompt_digest, ScriptEntry, ScriptError, ScriptFile, ScriptedProvider};
pub use template::{describe_api, PromptRole, PromptSet, PromptTemplate, TemplateError, PROMPTS_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub role: PromptRole,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn new(role: PromptRole, prompt: impl Into<String>) -> Self {
        Self {
            role,
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Complete,
    Truncated,
    ProviderError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
}

impl CompletionResult {
    pub fn complete(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Complete,
            http_status: None,
        }
    }

    pub fn provider_error(diagnostic: impl Into<String>) -> Self {
        Self {
            text: diagnostic.into(),
            finish_reason: FinishReason::ProviderError,
            http_status: None,
        }
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::ProviderError
    }
}

#[async_trait]
pub trait LlmProvider: Send + Sync {
    async fn complete(&self, request: &CompletionRequest) -> CompletionResult;
}
