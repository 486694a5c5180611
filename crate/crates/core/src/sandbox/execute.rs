use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use percent_encoding::{utf8_percent_encode, AsciiSet, CONTROLS};
use reqwest::header::{HeaderMap, HeaderName, HeaderValue, AUTHORIZATION};
use serde::Serialize;
use serde_json::{Map, Value};
use url::Url;

use crate::corpus::{ApiSpec, HttpMethod, ParamLocation};
use crate::trial::PlannedCall;

use super::{map_response, ErrorClass, ExecutionResult, SandboxError};

pub const DEFAULT_RESPONSE_CAP: usize = 64 * 1024;

const PATH_SEGMENT: &AsciiSet = &CONTROLS
    .add(b' ')
    .add(b'"')
    .add(b'#')
    .add(b'%')
    .add(b'/')
    .add(b'<')
    .add(b'>')
    .add(b'?')
    .add(b'`')
    .add(b'{')
    .add(b'}');

/// Hosts the sandbox may contact. Entries are `host` or `host:port`,
/// compared case-insensitively.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Allowlist {
    entries: BTreeSet<String>,
}

impl Allowlist {
    pub fn new<I, S>(hosts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut a = Self::default();
        for h in hosts {
            a.insert(h.as_ref());
        }
        a
    }

    /// Parses a comma-separated list such as the `GRETEL_ALLOWLIST` value.
    pub fn parse(list: &str) -> Self {
        Self::new(list.split(','))
    }

    pub fn insert(&mut self, host: &str) {
        let h = host.trim().to_lowercase();
        if !h.is_empty() {
            self.entries.insert(h);
        }
    }

    pub fn extend(&mut self, other: &Allowlist) {
        self.entries.extend(other.entries.iter().cloned());
    }

    pub fn allows(&self, url: &Url) -> bool {
        let Some(host) = url.host_str() else {
            return false;
        };
        let host = host.to_lowercase();
        if self.entries.contains(&host) {
            return true;
        }
        url.port_or_known_default()
            .is_some_and(|port| self.entries.contains(&format!("{host}:{port}")))
    }

    pub fn hosts(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(String::as_str)
    }
}

/// Environment variable holding the bearer token for a tool:
/// `GRETEL_BEARER_<TOOL_ID>` with the id upper-cased and non-alphanumerics
/// replaced by `_`.
pub fn bearer_env_var(tool_id: &str) -> String {
    let id: String = tool_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("GRETEL_BEARER_{id}")
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub allowlist: Allowlist,
    /// Base for relative endpoint templates.
    pub base_url: Option<Url>,
    pub response_cap_bytes: usize,
    /// Per-tool bearer tokens keyed by tool_id. Tools without an entry fall
    /// back to their `GRETEL_BEARER_*` environment variable.
    pub bearer_tokens: BTreeMap<String, String>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            allowlist: Allowlist::default(),
            base_url: None,
            response_cap_bytes: DEFAULT_RESPONSE_CAP,
            bearer_tokens: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DispatchRecord {
    pub method: String,
    pub url: String,
    pub redirect: bool,
}

/// Dispatches planned calls over HTTP. Reentrant; clones share the client
/// and the dispatch log.
#[derive(Debug, Clone)]
pub struct Sandbox {
    cfg: Arc<SandboxConfig>,
    http: reqwest::Client,
    log: Arc<Mutex<Vec<DispatchRecord>>>,
}

fn value_to_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl Sandbox {
    pub fn new(cfg: SandboxConfig) -> Result<Self, SandboxError> {
        let log: Arc<Mutex<Vec<DispatchRecord>>> = Arc::default();
        let allow = cfg.allowlist.clone();
        let redirect_log = Arc::clone(&log);
        let policy = reqwest::redirect::Policy::custom(move |attempt| {
            if attempt.previous().len() >= 5 || !allow.allows(attempt.url()) {
                return attempt.stop();
            }
            redirect_log.lock().expect("dispatch log").push(DispatchRecord {
                method: "GET".into(),
                url: attempt.url().to_string(),
                redirect: true,
            });
            attempt.follow()
        });
        let http = reqwest::Client::builder()
            .redirect(policy)
            .build()
            .map_err(|e| SandboxError::Client(e.to_string()))?;
        Ok(Self {
            cfg: Arc::new(cfg),
            http,
            log,
        })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.cfg
    }

    /// Every request actually sent, in dispatch order.
    pub fn dispatch_log(&self) -> Vec<DispatchRecord> {
        self.log.lock().expect("dispatch log").clone()
    }

    fn token_for(&self, tool_id: &str) -> Option<String> {
        self.cfg
            .bearer_tokens
            .get(tool_id)
            .cloned()
            .or_else(|| std::env::var(bearer_env_var(tool_id)).ok())
            .filter(|t| !t.is_empty())
    }

    /// Builds the request URL: path slots substituted, query parameters
    /// appended, relative templates joined onto the base URL.
    pub fn build_url(&self, call: &PlannedCall, api: &ApiSpec) -> Result<Url, SandboxError> {
        let mut target = api.endpoint_template.clone();
        for p in api.params.iter().filter(|p| p.location == ParamLocation::Path) {
            let raw = call.bindings.get(&p.name).map(value_to_text).unwrap_or_default();
            let encoded = utf8_percent_encode(&raw, PATH_SEGMENT).to_string();
            target = target.replace(&format!("{{{}}}", p.name), &encoded);
        }
        let mut url = if target.starts_with("http://") || target.starts_with("https://") {
            Url::parse(&target)
        } else {
            let base = self
                .cfg
                .base_url
                .as_ref()
                .ok_or_else(|| SandboxError::NoBaseUrl(target.clone()))?;
            base.join(&target)
        }
        .map_err(|e| SandboxError::InvalidUrl {
            url: target.clone(),
            message: e.to_string(),
        })?;
        let query: Vec<(String, String)> = api
            .params
            .iter()
            .filter(|p| p.location == ParamLocation::Query)
            .filter_map(|p| call.bindings.get(&p.name).map(|v| (p.name.clone(), value_to_text(v))))
            .collect();
        if !query.is_empty() {
            url.query_pairs_mut().extend_pairs(query);
        }
        Ok(url)
    }

    /// Executes one planned call. Off-allowlist targets are refused before
    /// anything is sent; every other failure is an [`ExecutionResult`].
    pub async fn execute(
        &self,
        call: &PlannedCall,
        api: &ApiSpec,
        timeout: Duration,
    ) -> Result<ExecutionResult, SandboxError> {
        let url = self.build_url(call, api)?;
        if !self.cfg.allowlist.allows(&url) {
            return Err(SandboxError::HostNotAllowed(url.host_str().unwrap_or("").to_string()));
        }

        let mut headers = HeaderMap::new();
        let mut body = Map::new();
        for p in &api.params {
            let Some(v) = call.bindings.get(&p.name) else {
                continue;
            };
            match p.location {
                ParamLocation::Header => {
                    let name = HeaderName::from_bytes(p.name.as_bytes());
                    let value = HeaderValue::from_str(&value_to_text(v));
                    match (name, value) {
                        (Ok(n), Ok(val)) => {
                            headers.insert(n, val);
                        }
                        _ => {
                            return Ok(ExecutionResult::error(
                                ErrorClass::Schema,
                                format!("header parameter `{}` is not a valid HTTP header", p.name),
                                0,
                            ))
                        }
                    }
                }
                ParamLocation::Body => {
                    body.insert(p.name.clone(), v.clone());
                }
                ParamLocation::Query | ParamLocation::Path => {}
            }
        }
        if let Some(token) = self.token_for(&call.tool_id) {
            if let Ok(v) = HeaderValue::from_str(&format!("Bearer {token}")) {
                headers.insert(AUTHORIZATION, v);
            }
        }

        let mut req = match api.method {
            HttpMethod::Get => self.http.get(url.clone()),
            HttpMethod::Post => self.http.post(url.clone()),
        }
        .headers(headers)
        .timeout(timeout);
        if !body.is_empty() {
            req = req.json(&Value::Object(body));
        }

        self.log.lock().expect("dispatch log").push(DispatchRecord {
            method: api.method.to_string(),
            url: url.to_string(),
            redirect: false,
        });
        let started = Instant::now();
        let elapsed = || started.elapsed().as_millis() as u64;
        let mut resp = match req.send().await {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Ok(ExecutionResult::error(ErrorClass::Timeout, e.to_string(), elapsed()))
            }
            Err(e) => return Ok(ExecutionResult::error(ErrorClass::Connection, e.to_string(), elapsed())),
        };
        let status = resp.status().as_u16();

        let cap = self.cfg.response_cap_bytes;
        let mut bytes: Vec<u8> = Vec::new();
        let mut truncated = false;
        loop {
            match resp.chunk().await {
                Ok(Some(chunk)) => {
                    let room = cap.saturating_sub(bytes.len());
                    if chunk.len() > room {
                        bytes.extend_from_slice(&chunk[..room]);
                        truncated = true;
                        break;
                    }
                    bytes.extend_from_slice(&chunk);
                }
                Ok(None) => break,
                Err(e) if e.is_timeout() => {
                    return Ok(ExecutionResult::error(ErrorClass::Timeout, e.to_string(), elapsed()))
                }
                Err(e) => return Ok(ExecutionResult::error(ErrorClass::Connection, e.to_string(), elapsed())),
            }
        }
        let latency = elapsed();

        let text = String::from_utf8_lossy(&bytes);
        let body = if text.trim().is_empty() {
            None
        } else {
            match serde_json::from_str::<Value>(&text) {
                Ok(v) => Some(v),
                Err(_) if truncated => Some(Value::String(text.into_owned())),
                Err(e) if (200..300).contains(&status) => {
                    let mut r =
                        ExecutionResult::error(ErrorClass::Schema, format!("response body is not JSON: {e}"), latency);
                    r.http_status = Some(status);
                    return Ok(r);
                }
                Err(_) => Some(Value::String(text.into_owned())),
            }
        };
        let mut result = map_response(status, body, latency);
        result.truncated = truncated;
        Ok(result)
    }
}
