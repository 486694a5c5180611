use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::json;
use tokio::sync::Semaphore;

use super::{CompletionRequest, CompletionResult, FinishReason, LlmProvider};

#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    pub endpoint: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

/// Chat-completion client: `messages` in, `choices` out.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    cfg: HttpProviderConfig,
    http: reqwest::Client,
    permits: Arc<Semaphore>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

impl HttpProvider {
    pub fn new(cfg: HttpProviderConfig) -> Result<Self, reqwest::Error> {
        let http = reqwest::Client::builder().timeout(cfg.timeout).build()?;
        let permits = Arc::new(Semaphore::new(cfg.max_in_flight.max(1)));
        Ok(Self { cfg, http, permits })
    }

    async fn call(&self, request: &CompletionRequest) -> CompletionResult {
        let body = json!({
            "model": self.cfg.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.http.post(&self.cfg.endpoint).json(&body);
        if let Some(token) = &self.cfg.token {
            builder = builder.bearer_auth(token);
        }
        let resp = match builder.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return CompletionResult::provider_error(format!("timeout: {e}")),
            Err(e) => return CompletionResult::provider_error(format!("request failed: {e}")),
        };
        let status = resp.status().as_u16();
        if !resp.status().is_success() {
            let text = resp.text().await.unwrap_or_default();
            let preview: String = text.chars().take(200).collect();
            return CompletionResult {
                text: format!("HTTP {status}: {preview}"),
                finish_reason: FinishReason::ProviderError,
                http_status: Some(status),
            };
        }
        let parsed: ChatResponse = match resp.json().await {
            Ok(p) => p,
            Err(e) => {
                return CompletionResult {
                    text: format!("malformed chat-completion body: {e}"),
                    finish_reason: FinishReason::ProviderError,
                    http_status: Some(status),
                }
            }
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return CompletionResult {
                text: "response has no choices".into(),
                finish_reason: FinishReason::ProviderError,
                http_status: Some(status),
            };
        };
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Truncated,
            _ => FinishReason::Complete,
        };
        CompletionResult {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            http_status: Some(status),
        }
    }
}

#[async_trait]
impl LlmProvider for HttpProvider {
    async fn complete(&self, request: &CompletionRequest) -> CompletionResult {
        let Ok(_permit) = self.permits.acquire().await else {
            return CompletionResult::provider_error("provider closed");
        };
        self.call(request).await
    }
}
