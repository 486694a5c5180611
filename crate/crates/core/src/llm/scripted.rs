use std::collections::HashMap;
use std::fs;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{CompletionRequest, CompletionResult, LlmProvider};

/// Hex SHA-256 of a rendered prompt.
pub fn prompt_digest(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// One scripted answer. `prompt_sha256` entries match exactly; otherwise
/// the entry matches when every `contains` substring occurs in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    /// A string is returned verbatim; any other JSON value is returned in
    /// compact serialized form.
    pub response: Value,
}

impl ScriptEntry {
    pub fn contains(needles: &[&str], response: Value) -> Self {
        Self {
            prompt_sha256: None,
            contains: needles.iter().map(|s| s.to_string()).collect(),
            response,
        }
    }

    fn response_text(&self) -> String {
        match &self.response {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    pub entries: Vec<ScriptEntry>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("failed to read script {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid script {path}: {message}")]
    Parse { path: String, message: String },
    #[error("script entry {0} has neither prompt_sha256 nor contains")]
    EmptyMatcher(usize),
}

/// Deterministic provider: the answer is a pure function of the prompt.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    by_digest: HashMap<String, String>,
    by_substring: Vec<(Vec<String>, String)>,
}

impl ScriptedProvider {
    pub fn new(script: ScriptFile) -> Result<Self, ScriptError> {
        let mut p = Self::default();
        for (i, entry) in script.entries.into_iter().enumerate() {
            let text = entry.response_text();
            match (&entry.prompt_sha256, entry.contains.is_empty()) {
                (Some(d), _) => {
                    // first entry for a digest wins
                    p.by_digest.entry(d.to_lowercase()).or_insert(text);
                }
                (None, false) => p.by_substring.push((entry.contains, text)),
                (None, true) => return Err(ScriptError::EmptyMatcher(i)),
            }
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = fs::read_to_string(path).map_err(|e| ScriptError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let script: ScriptFile = serde_json::from_str(&text).map_err(|e| ScriptError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::new(script)
    }

    pub fn lookup(&self, prompt: &str) -> Option<&str> {
        if let Some(hit) = self.by_digest.get(&prompt_digest(prompt)) {
            return Some(hit);
        }
        self.by_substring
            .iter()
            .find(|(needles, _)| needles.iter().all(|n| prompt.contains(n.as_str())))
            .map(|(_, text)| text.as_str())
    }
}

#[async_trait]
impl LlmProvider for ScriptedProvider {
    async fn complete(&self, request: &CompletionRequest) -> CompletionResult {
        match self.lookup(&request.prompt) {
            Some(text) => CompletionResult::complete(text),
            None => CompletionResult::provider_error(format!(
                "unscripted prompt (role {}, sha256 {})",
                request.role,
                prompt_digest(&request.prompt)
            )),
        }
    }
}
