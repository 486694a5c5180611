use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::body::{to_bytes, Body};
use axum::extract::{Request, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::corpus::{ApiSpec, Corpus, HttpMethod, ParamLocation, ToolKey};

use super::SandboxError;

fn default_status() -> u16 {
    200
}

/// Scripted behavior for one `(tool, api)` route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBehavior {
    #[serde(default = "default_status")]
    pub respond_status: u16,
    /// Response body. Strings of the form `{{param}}` are replaced by the
    /// received parameter value.
    #[serde(default)]
    pub body: Value,
    #[serde(default)]
    pub latency_ms: u64,
    #[serde(default)]
    pub require_auth: bool,
    #[serde(default)]
    pub validate_params: bool,
}

impl MockBehavior {
    pub fn respond(status: u16, body: Value) -> Self {
        Self {
            respond_status: status,
            body,
            latency_ms: 0,
            require_auth: false,
            validate_params: false,
        }
    }
}

/// `scenario.json`: `"tool_id/api_name"` -> behavior.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScenario(pub BTreeMap<String, MockBehavior>);

impl MockScenario {
    pub fn insert(&mut self, key: &ToolKey, behavior: MockBehavior) {
        self.0.insert(format!("{}/{}", key.tool_id, key.api_name), behavior);
    }

    pub fn load(path: &Path) -> Result<Self, SandboxError> {
        let io = |message: String| SandboxError::ScenarioIo {
            path: path.display().to_string(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }

    /// Resolves every key against the corpus.
    pub fn resolve<'a>(
        &'a self,
        corpus: &'a Corpus,
    ) -> Result<Vec<(ToolKey, &'a ApiSpec, &'a MockBehavior)>, SandboxError> {
        self.0
            .iter()
            .map(|(k, behavior)| {
                let (tool_id, api_name) = k
                    .split_once('/')
                    .ok_or_else(|| SandboxError::UnknownScenarioKey(k.clone()))?;
                let key = ToolKey::new(tool_id, api_name);
                let (_, api) = corpus
                    .api(&key)
                    .ok_or_else(|| SandboxError::UnknownScenarioKey(k.clone()))?;
                Ok((key, api, behavior))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RequestRecord {
    pub method: String,
    pub path: String,
    pub query: Option<String>,
    pub route: Option<String>,
    pub status: u16,
    pub authorized: bool,
}

#[derive(Debug, Clone)]
enum Segment {
    Literal(String),
    Slot(String),
}

struct Route {
    key: String,
    method: Method,
    segments: Vec<Segment>,
    api: ApiSpec,
    behavior: MockBehavior,
}

struct MockState {
    routes: Vec<Route>,
    log: Arc<Mutex<Vec<RequestRecord>>>,
}

/// Path portion of an endpoint template, without scheme, authority or query.
fn template_path(template: &str) -> &str {
    let rest = match template.find("://") {
        Some(i) => {
            let after = &template[i + 3..];
            after.find('/').map_or("/", |j| &after[j..])
        }
        None => template,
    };
    rest.split('?').next().unwrap_or(rest)
}

fn split_segments(path: &str) -> impl Iterator<Item = &str> {
    path.split('/').filter(|s| !s.is_empty())
}

fn compile(template: &str) -> Vec<Segment> {
    split_segments(template_path(template))
        .map(|s| match s.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(name) => Segment::Slot(name.to_string()),
            None => Segment::Literal(s.to_string()),
        })
        .collect()
}

fn match_route(segments: &[Segment], path: &str) -> Option<BTreeMap<String, Value>> {
    let parts: Vec<&str> = split_segments(path).collect();
    if parts.len() != segments.len() {
        return None;
    }
    let mut captured = BTreeMap::new();
    for (seg, part) in segments.iter().zip(parts) {
        let decoded = percent_encoding::percent_decode_str(part)
            .decode_utf8_lossy()
            .into_owned();
        match seg {
            Segment::Literal(l) if *l == decoded => {}
            Segment::Literal(_) => return None,
            Segment::Slot(name) => {
                captured.insert(name.clone(), Value::String(decoded));
            }
        }
    }
    Some(captured)
}

fn fill_template(body: &Value, params: &BTreeMap<String, Value>) -> Value {
    match body {
        Value::String(s) => {
            if let Some(name) = s.strip_prefix("{{").and_then(|r| r.strip_suffix("}}")) {
                if let Some(v) = params.get(name) {
                    return v.clone();
                }
            }
            let mut out = s.clone();
            for (name, v) in params {
                let text = match v {
                    Value::String(t) => t.clone(),
                    other => other.to_string(),
                };
                out = out.replace(&format!("{{{{{name}}}}}", name = name), &text);
            }
            Value::String(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(|v| fill_template(v, params)).collect()),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| (k.clone(), fill_template(v, params)))
                .collect::<Map<_, _>>(),
        ),
        other => other.clone(),
    }
}

async fn handle(State(state): State<Arc<MockState>>, req: Request) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let query = req.uri().query().map(str::to_string);
    let headers = req.headers().clone();
    let authorized = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("Bearer ") && v.len() > "Bearer ".len());
    let body_bytes = to_bytes(req.into_body(), 1 << 20).await.unwrap_or_default();

    let matched = state.routes.iter().find_map(|r| {
        if r.method != method {
            return None;
        }
        match_route(&r.segments, &path).map(|captured| (r, captured))
    });

    let record = |route: Option<&str>, status: u16| RequestRecord {
        method: method.to_string(),
        path: path.clone(),
        query: query.clone(),
        route: route.map(str::to_string),
        status,
        authorized,
    };

    let Some((route, mut params)) = matched else {
        state.log.lock().expect("request log").push(record(None, 404));
        return (
            StatusCode::NOT_FOUND,
            Json(json!({"error": "no such route", "path": path})),
        )
            .into_response();
    };

    let b = &route.behavior;
    if b.latency_ms > 0 {
        tokio::time::sleep(Duration::from_millis(b.latency_ms)).await;
    }

    if let Some(q) = &query {
        for (k, v) in url::form_urlencoded::parse(q.as_bytes()) {
            params.insert(k.into_owned(), Value::String(v.into_owned()));
        }
    }
    if let Ok(Value::Object(map)) = serde_json::from_slice::<Value>(&body_bytes) {
        params.extend(map);
    }
    for p in route.api.params.iter().filter(|p| p.location == ParamLocation::Header) {
        if let Some(v) = headers.get(p.name.as_str()).and_then(|v| v.to_str().ok()) {
            params.insert(p.name.clone(), Value::String(v.to_string()));
        }
    }

    let (status, body) = if b.require_auth && !authorized {
        (
            401,
            json!({"error": "unauthorized", "message": "missing or invalid bearer token"}),
        )
    } else {
        let missing: Vec<&str> = if b.validate_params {
            route
                .api
                .required_params()
                .filter(|p| !params.contains_key(&p.name))
                .map(|p| p.name.as_str())
                .collect()
        } else {
            Vec::new()
        };
        if missing.is_empty() {
            (b.respond_status, fill_template(&b.body, &params))
        } else {
            (400, json!({"error": "missing required parameter", "missing": missing}))
        }
    };

    state
        .log
        .lock()
        .expect("request log")
        .push(record(Some(&route.key), status));
    let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    let mut resp = if body.is_null() {
        Response::new(Body::empty())
    } else {
        Json(body).into_response()
    };
    *resp.status_mut() = code;
    resp
}

/// A running mock server. Dropping the handle stops it.
pub struct MockServer {
    addr: SocketAddr,
    log: Arc<Mutex<Vec<RequestRecord>>>,
    shutdown: Option<oneshot::Sender<()>>,
    task: Option<JoinHandle<()>>,
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/", self.addr)
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.log.lock().expect("request log").clone()
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }

    /// Resolves when the server task exits.
    pub async fn wait(mut self) {
        if let Some(task) = self.task.take() {
            let _ = task.await;
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

/// Starts the mock tool server on `addr` (port 0 picks a free port).
pub async fn serve_mock(
    scenario: &MockScenario,
    corpus: &Corpus,
    addr: SocketAddr,
) -> Result<MockServer, SandboxError> {
    let routes = scenario
        .resolve(corpus)?
        .into_iter()
        .map(|(key, api, behavior)| Route {
            key: format!("{}/{}", key.tool_id, key.api_name),
            method: match api.method {
                HttpMethod::Get => Method::GET,
                HttpMethod::Post => Method::POST,
            },
            segments: compile(&api.endpoint_template),
            api: api.clone(),
            behavior: behavior.clone(),
        })
        .collect();
    let listener = TcpListener::bind(addr).await.map_err(|e| SandboxError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    let local = listener.local_addr().map_err(|e| SandboxError::Bind {
        addr: addr.to_string(),
        message: e.to_string(),
    })?;
    let log: Arc<Mutex<Vec<RequestRecord>>> = Arc::default();
    let state = Arc::new(MockState {
        routes,
        log: Arc::clone(&log),
    });
    let app = Router::new().fallback(handle).with_state(state);
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await;
    });
    Ok(MockServer {
        addr: local,
        log,
        shutdown: Some(tx),
        task: Some(task),
    })
}
