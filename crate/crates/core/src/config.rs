//! Run configuration.
//!
//! A TOML file with one table per stage. Relative paths resolve against the
//! directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eval::EvalOptions;
use crate::rerank::RerankMode;
use crate::retriever::Bm25Params;
use crate::sandbox::DEFAULT_RESPONSE_CAP;
use crate::trial::TrialConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub tools: PathBuf,
    pub queries: PathBuf,
    #[serde(default)]
    pub scenario: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub k1: f64,
    pub b: f64,
    /// Weight of the dense score in fusion; 0 keeps retrieval sparse-only.
    pub alpha: f64,
    pub embedding_endpoint: Option<String>,
    pub top_k: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        Self {
            k1: p.k1,
            b: p.b,
            alpha: 0.0,
            embedding_endpoint: None,
            top_k: 10,
        }
    }
}

impl RetrieverConfig {
    pub fn bm25(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub mode: LlmMode,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub script_path: Option<PathBuf>,
    /// Environment variable holding the bearer token for the HTTP provider.
    pub token_env: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub prompts_dir: Option<PathBuf>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            mode: LlmMode::Scripted,
            endpoint: None,
            model: None,
            script_path: None,
            token_env: "GRETEL_LLM_TOKEN".into(),
            timeout_ms: 30_000,
            max_in_flight: 4,
            prompts_dir: None,
        }
    }
}

fn on_off<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        Bool(bool),
        Word(String),
    }
    match Flag::deserialize(d)? {
        Flag::Bool(b) => Ok(b),
        Flag::Word(w) => match w.to_ascii_lowercase().as_str() {
            "on" => Ok(true),
            "off" => Ok(false),
            other => Err(serde::de::Error::custom(format!("expected on/off, got `{other}`"))),
        },
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub mode: RerankMode,
    #[serde(deserialize_with = "on_off")]
    pub latency_tiebreak: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxSection {
    pub allowlist: Vec<String>,
    pub response_cap_bytes: usize,
    pub base_url: Option<String>,
}

impl Default for SandboxSection {
    fn default() -> Self {
        Self {
            allowlist: Vec::new(),
            response_cap_bytes: DEFAULT_RESPONSE_CAP,
            base_url: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub permissive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub retriever: RetrieverConfig,
    #[serde(default)]
    pub trial: TrialConfig,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub rerank: RerankConfig,
    #[serde(default)]
    pub eval: EvalOptions,
    #[serde(default)]
    pub sandbox: SandboxSection,
    #[serde(default)]
    pub ingest: IngestConfig,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.tools);
        fix(&mut self.paths.queries);
        fix(&mut self.paths.output_dir);
        if let Some(p) = self.paths.scenario.as_mut() {
            fix(p);
        }
        if let Some(p) = self.llm.script_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.llm.prompts_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        match self.llm.mode {
            LlmMode::Http if self.llm.endpoint.is_none() || self.llm.model.is_none() => {
                return bad("llm.mode = \"http\" requires llm.endpoint and llm.model")
            }
            LlmMode::Scripted if self.llm.script_path.is_none() => {
                return bad("llm.mode = \"scripted\" requires llm.script_path")
            }
            _ => {}
        }
        let k = &self.eval.k_values;
        if k.is_empty() {
            return bad("k_values must not be empty");
        }
        if k.contains(&0) {
            return bad("k_values must be positive");
        }
        if k.windows(2).any(|w| w[0] >= w[1]) {
            return bad("k_values must ascend");
        }
        if !(self.retriever.k1 >= 0.0 && self.retriever.k1.is_finite()) {
            return bad("retriever.k1 must be a non-negative number");
        }
        if !(0.0..=1.0).contains(&self.retriever.b) {
            return bad("retriever.b must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.retriever.alpha) {
            return bad("retriever.alpha must lie in [0, 1]");
        }
        if self.retriever.alpha > 0.0 && self.retriever.embedding_endpoint.is_none() {
            return bad("retriever.alpha > 0 requires retriever.embedding_endpoint");
        }
        if self.retriever.top_k == 0 {
            return bad("retriever.top_k must be at least 1");
        }
        if self.trial.max_concurrency == 0 {
            return bad("trial.max_concurrency must be at least 1");
        }
        if self.trial.timeout_ms == 0 {
            return bad("trial.timeout_ms must be at least 1");
        }
        if self.llm.max_in_flight == 0 {
            return bad("llm.max_in_flight must be at least 1");
        }
        Ok(())
    }

    /// Digest over the behavioral settings and the content of every input
    /// file. Paths themselves do not contribute, so a relocated fixture keeps
    /// its digest.
    pub fn digest(&self) -> Result<String, ConfigError> {
        let mut canonical = self.clone();
        canonical.paths = PathsConfig::default();
        canonical.llm.script_path = None;
        canonical.llm.prompts_dir = None;
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&canonical).expect("config serializes"));
        let mut inputs = vec![
            ("tools", Some(self.paths.tools.clone())),
            ("queries", Some(self.paths.queries.clone())),
            ("scenario", self.paths.scenario.clone()),
            ("script", self.llm.script_path.clone()),
        ];
        if let Some(dir) = &self.llm.prompts_dir {
            for role in ["planner", "simulator", "evaluator"] {
                inputs.push(("prompt", Some(dir.join(format!("{role}.txt")))));
            }
        }
        for (label, path) in inputs {
            h.update(label.as_bytes());
            if let Some(p) = path {
                let bytes = fs::read(&p).map_err(|e| ConfigError::Io {
                    path: p.display().to_string(),
                    message: e.to_string(),
                })?;
                h.update(Sha256::digest(&bytes));
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = r#"
[paths]
tools = "tools.jsonl"
queries = "queries.jsonl"

[llm]
script_path = "script.json"
"#;

    fn parse(extra: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(&format!("{MIN}\n{extra}"), Path::new("/fx"))
    }

    #[test]
    fn defaults_and_relative_paths() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg.paths.tools, PathBuf::from("/fx/tools.jsonl"));
        assert_eq!(cfg.paths.output_dir, PathBuf::from("/fx/out"));
        assert_eq!(cfg.llm.script_path, Some(PathBuf::from("/fx/script.json")));
        assert_eq!(cfg.trial.timeout_ms, 10_000);
        assert_eq!(cfg.retriever.top_k, 10);
        assert!(cfg.eval.pass_rate_requires_relevance);
    }

    #[test]
    fn k_values_must_ascend() {
        let err = parse("[eval]\nk_values = [5, 3]").unwrap_err();
        assert_eq!(err.to_string(), "k_values must ascend");
        assert!(parse("[eval]\nk_values = []").is_err());
        assert!(parse("[eval]\nk_values = [3, 3]").is_err());
    }

    #[test]
    fn http_mode_needs_endpoint_and_model() {
        let text = "[paths]\ntools = \"t\"\nqueries = \"q\"\n[llm]\nmode = \"http\"\nendpoint = \"http://x\"\n";
        assert!(RunConfig::parse(text, Path::new(".")).is_err());
        let ok = format!("{text}model = \"m\"\n");
        assert!(RunConfig::parse(&ok, Path::new(".")).is_ok());
    }

    #[test]
    fn scripted_mode_needs_script() {
        let text = "[paths]\ntools = \"t\"\nqueries = \"q\"\n";
        assert!(RunConfig::parse(text, Path::new(".")).is_err());
    }

    #[test]
    fn latency_tiebreak_accepts_words() {
        assert!(
            parse("[rerank]\nlatency_tiebreak = \"on\"")
                .unwrap()
                .rerank
                .latency_tiebreak
        );
        assert!(
            !parse("[rerank]\nlatency_tiebreak = false")
                .unwrap()
                .rerank
                .latency_tiebreak
        );
        assert!(parse("[rerank]\nlatency_tiebreak = \"maybe\"").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("[trial]\ntimeout = 5").is_err());
    }

    #[test]
    fn digest_tracks_settings_and_content() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["tools.jsonl", "queries.jsonl", "script.json"] {
            fs::write(dir.path().join(f), f).unwrap();
        }
        let load = |extra: &str| {
            RunConfig::parse(&format!("{MIN}\n{extra}"), dir.path())
                .unwrap()
                .digest()
                .unwrap()
        };
        let a = load("");
        assert_eq!(a, load(""));
        assert_eq!(a.len(), 64);
        assert_ne!(a, load("[trial]\nsimulation_enabled = false"));
        fs::write(dir.path().join("tools.jsonl"), "changed").unwrap();
        assert_ne!(a, load(""));
    }
}
