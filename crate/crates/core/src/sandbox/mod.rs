//! Real execution of planned calls behind a host allowlist, the embedded
//! mock tool server used for offline runs, and the failure taxonomy.

mod classify;
mod execute;
mod mock;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use classify::{classify, FailureClass};
pub use execute::{bearer_env_var, Allowlist, DispatchRecord, Sandbox, SandboxConfig, DEFAULT_RESPONSE_CAP};
pub use mock::{serve_mock, MockBehavior, MockScenario, MockServer, RequestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecStatus {
    Success,
    Error,
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    Auth,
    ClientError,
    ServerError,
    Timeout,
    Connection,
    Schema,
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ErrorClass::Auth => "auth",
            ErrorClass::ClientError => "client_error",
            ErrorClass::ServerError => "server_error",
            ErrorClass::Timeout => "timeout",
            ErrorClass::Connection => "connection",
            ErrorClass::Schema => "schema",
        })
    }
}

/// Outcome of one real call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub status: ExecStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_class: Option<ErrorClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub http_status: Option<u16>,
    pub latency_ms: u64,
    #[serde(default)]
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl ExecutionResult {
    pub fn error(class: ErrorClass, message: impl Into<String>, latency_ms: u64) -> Self {
        Self {
            status: ExecStatus::Error,
            payload: None,
            error_class: Some(class),
            http_status: None,
            latency_ms,
            truncated: false,
            message: Some(message.into()),
        }
    }

    /// One-line description for prompts and logs.
    pub fn describe(&self) -> String {
        let mut s = match (self.status, self.error_class) {
            (ExecStatus::Error, Some(class)) => format!("error ({class})"),
            (status, _) => format!("{status:?}").to_lowercase(),
        };
        if let Some(code) = self.http_status {
            s.push_str(&format!(", HTTP {code}"));
        }
        if let Some(m) = &self.message {
            s.push_str(&format!(": {m}"));
        }
        if let Some(p) = &self.payload {
            let body: String = p.to_string().chars().take(300).collect();
            s.push_str(&format!(", body {body}"));
        }
        s
    }
}

/// True for `{}`, `[]`, `""` and `null`.
pub fn is_empty_payload(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::String(s) => s.is_empty(),
        Value::Array(a) => a.is_empty(),
        Value::Object(o) => o.is_empty(),
        _ => false,
    }
}

/// Maps a completed HTTP exchange onto an [`ExecutionResult`].
pub fn map_response(http_status: u16, body: Option<Value>, latency_ms: u64) -> ExecutionResult {
    let mut r = ExecutionResult {
        status: ExecStatus::Error,
        payload: body,
        error_class: None,
        http_status: Some(http_status),
        latency_ms,
        truncated: false,
        message: None,
    };
    match http_status {
        200..=299 => match &r.payload {
            Some(p) if !is_empty_payload(p) => r.status = ExecStatus::Success,
            _ => r.status = ExecStatus::Empty,
        },
        401 | 403 => r.error_class = Some(ErrorClass::Auth),
        500..=599 => r.error_class = Some(ErrorClass::ServerError),
        _ => r.error_class = Some(ErrorClass::ClientError),
    }
    r
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("host `{0}` is not on the allowlist")]
    HostNotAllowed(String),
    #[error("relative endpoint `{0}` but no sandbox base URL is configured")]
    NoBaseUrl(String),
    #[error("invalid URL `{url}`: {message}")]
    InvalidUrl { url: String, message: String },
    #[error("scenario references unknown (tool, api) pair `{0}`")]
    UnknownScenarioKey(String),
    #[error("failed to read scenario {path}: {message}")]
    ScenarioIo { path: String, message: String },
    #[error("failed to bind mock server on {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("http client: {0}")]
    Client(String),
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    // Hand-applied status table: (http_status, payload) -> (status, error_class)
    #[test]
    fn status_mapping_table() {
        let cases: &[(u16, Option<Value>, ExecStatus, Option<ErrorClass>)] = &[
            (200, Some(json!({"flights": [1]})), ExecStatus::Success, None),
            (200, Some(json!([])), ExecStatus::Empty, None),
            (200, Some(json!({})), ExecStatus::Empty, None),
            (204, None, ExecStatus::Empty, None),
            (201, Some(json!("")), ExecStatus::Empty, None),
            (200, Some(json!(0)), ExecStatus::Success, None),
            (
                401,
                Some(json!({"error": "unauthorized"})),
                ExecStatus::Error,
                Some(ErrorClass::Auth),
            ),
            (403, None, ExecStatus::Error, Some(ErrorClass::Auth)),
            (404, None, ExecStatus::Error, Some(ErrorClass::ClientError)),
            (400, None, ExecStatus::Error, Some(ErrorClass::ClientError)),
            (302, None, ExecStatus::Error, Some(ErrorClass::ClientError)),
            (500, None, ExecStatus::Error, Some(ErrorClass::ServerError)),
            (503, None, ExecStatus::Error, Some(ErrorClass::ServerError)),
        ];
        for (code, body, status, class) in cases {
            let r = map_response(*code, body.clone(), 1);
            assert_eq!(r.status, *status, "HTTP {code}");
            assert_eq!(r.error_class, *class, "HTTP {code}");
            assert_eq!(r.http_status, Some(*code));
        }
    }
}
