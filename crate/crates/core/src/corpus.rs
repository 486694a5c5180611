//! Tool corpus and labeled query ingestion.
//!
//! Both inputs are JSONL: one tool (or one query) per line. Validation is
//! strict by default; [`LoadOptions::permissive`] downgrades unknown fields
//! to warnings, which real ToolBench dumps need.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// A `(tool_id, api_name)` pair: the unit that gets retrieved, trialed and
/// ranked. Ordering is lexicographic on `(tool_id, api_name)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ToolKey {
    pub tool_id: String,
    pub api_name: String,
}

impl ToolKey {
    pub fn new(tool_id: impl Into<String>, api_name: impl Into<String>) -> Self {
        Self {
            tool_id: tool_id.into(),
            api_name: api_name.into(),
        }
    }
}

impl fmt::Display for ToolKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.tool_id, self.api_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    String,
    Integer,
    Number,
    Boolean,
    Array,
    Object,
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamKind::String => "string",
            ParamKind::Integer => "integer",
            ParamKind::Number => "number",
            ParamKind::Boolean => "boolean",
            ParamKind::Array => "array",
            ParamKind::Object => "object",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamLocation {
    Query,
    Path,
    Body,
    Header,
}

impl fmt::Display for ParamLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamLocation::Query => "query",
            ParamLocation::Path => "path",
            ParamLocation::Body => "body",
            ParamLocation::Header => "header",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum HttpMethod {
    Get,
    Post,
}

impl fmt::Display for HttpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HttpMethod::Get => f.write_str("GET"),
            HttpMethod::Post => f.write_str("POST"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
    pub location: ParamLocation,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSpec {
    pub api_name: String,
    pub description: String,
    pub method: HttpMethod,
    /// Absolute URL or a path resolved against the sandbox base URL.
    /// `{slot}` segments are filled from path-location parameters.
    pub endpoint_template: String,
    #[serde(default)]
    pub requires_auth: bool,
    #[serde(default)]
    pub params: Vec<ParamSpec>,
}

impl ApiSpec {
    pub fn param(&self, name: &str) -> Option<&ParamSpec> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn required_params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.params.iter().filter(|p| p.required)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_id: String,
    pub name: String,
    pub description: String,
    pub apis: Vec<ApiSpec>,
}

impl ToolSpec {
    pub fn api(&self, api_name: &str) -> Option<&ApiSpec> {
        self.apis.iter().find(|a| a.api_name == api_name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub relevant: BTreeSet<ToolKey>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("duplicate tool_id `{tool_id}` on line {line} (first seen on line {first_line})")]
    DuplicateTool {
        tool_id: String,
        line: usize,
        first_line: usize,
    },
    #[error("unknown relevance labels: {}", format_dangling(.0))]
    UnknownLabels(Vec<(String, String)>),
    #[error("corpus is empty")]
    Empty,
}

fn format_dangling(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .map(|(q, t)| format!("({q}, {t})"))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    pub permissive: bool,
}

/// Immutable tool index keyed by `tool_id`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    tools: BTreeMap<String, ToolSpec>,
    order: Vec<String>,
    pub warnings: Vec<String>,
}

impl Corpus {
    /// Builds a corpus from already-parsed tools, enforcing every invariant.
    pub fn from_tools(tools: Vec<ToolSpec>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        let mut first_seen = BTreeMap::new();
        for (i, tool) in tools.into_iter().enumerate() {
            corpus.insert(tool, i + 1, &mut first_seen)?;
        }
        Ok(corpus)
    }

    fn insert(
        &mut self,
        tool: ToolSpec,
        line: usize,
        first_seen: &mut BTreeMap<String, usize>,
    ) -> Result<(), CorpusError> {
        validate_tool(&tool).map_err(|message| CorpusError::Validation { line, message })?;
        if let Some(&first_line) = first_seen.get(&tool.tool_id) {
            return Err(CorpusError::DuplicateTool {
                tool_id: tool.tool_id,
                line,
                first_line,
            });
        }
        first_seen.insert(tool.tool_id.clone(), line);
        self.order.push(tool.tool_id.clone());
        self.tools.insert(tool.tool_id.clone(), tool);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn api_count(&self) -> usize {
        self.tools.values().map(|t| t.apis.len()).sum()
    }

    pub fn get(&self, tool_id: &str) -> Option<&ToolSpec> {
        self.tools.get(tool_id)
    }

    pub fn api(&self, key: &ToolKey) -> Option<(&ToolSpec, &ApiSpec)> {
        let tool = self.tools.get(&key.tool_id)?;
        tool.api(&key.api_name).map(|api| (tool, api))
    }

    /// Looks up a tool by id, falling back to an exact display-name match.
    pub fn resolve_tool(&self, id_or_name: &str) -> Option<&ToolSpec> {
        self.tools
            .get(id_or_name)
            .or_else(|| self.tools.values().find(|t| t.name == id_or_name))
    }

    /// Tools in file order.
    pub fn tools(&self) -> impl Iterator<Item = &ToolSpec> {
        self.order.iter().map(|id| &self.tools[id])
    }

    /// Every `(tool, api)` pair, in file order.
    pub fn api_pairs(&self) -> impl Iterator<Item = (&ToolSpec, &ApiSpec)> {
        self.tools().flat_map(|t| t.apis.iter().map(move |a| (t, a)))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for tool in self.tools() {
            out.push_str(&serde_json::to_string(tool).expect("tool serializes"));
            out.push('\n');
        }
        out
    }
}

const TOOL_FIELDS: &[&str] = &["tool_id", "name", "description", "apis"];
const API_FIELDS: &[&str] = &[
    "api_name",
    "description",
    "method",
    "endpoint_template",
    "requires_auth",
    "params",
];
const PARAM_FIELDS: &[&str] = &["name", "kind", "required", "location", "description"];
const QUERY_FIELDS: &[&str] = &["query_id", "text", "relevant"];
const LABEL_FIELDS: &[&str] = &["tool_id", "api_name"];

fn unknown_fields(value: &Value, known: &[&str], at: &str, out: &mut Vec<String>) {
    if let Value::Object(map) = value {
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                out.push(format!("unknown field `{key}` in {at}"));
            }
        }
    }
}

fn tool_unknown_fields(value: &Value) -> Vec<String> {
    let mut out = Vec::new();
    unknown_fields(value, TOOL_FIELDS, "tool", &mut out);
    if let Some(apis) = value.get("apis").and_then(Value::as_array) {
        for (i, api) in apis.iter().enumerate() {
            unknown_fields(api, API_FIELDS, &format!("apis[{i}]"), &mut out);
            if let Some(params) = api.get("params").and_then(Value::as_array) {
                for (j, p) in params.iter().enumerate() {
                    unknown_fields(p, PARAM_FIELDS, &format!("apis[{i}].params[{j}]"), &mut out);
                }
            }
        }
    }
    out
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

/// Names of the `{slot}` segments in an endpoint template.
pub fn template_slots(template: &str) -> Vec<String> {
    let mut slots = Vec::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) => {
                slots.push(after[..close].to_string());
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    slots
}

fn validate_tool(tool: &ToolSpec) -> Result<(), String> {
    if !is_identifier(&tool.tool_id) {
        return Err("tool_id must be a nonempty identifier".into());
    }
    if tool.description.trim().is_empty() {
        return Err(format!("tool `{}`: description must be nonempty", tool.tool_id));
    }
    if tool.apis.is_empty() {
        return Err(format!("tool `{}`: apis must be nonempty", tool.tool_id));
    }
    let mut api_names = HashSet::new();
    for api in &tool.apis {
        let at = format!("tool `{}` api `{}`", tool.tool_id, api.api_name);
        if !is_identifier(&api.api_name) {
            return Err(format!(
                "tool `{}`: api_name must be a nonempty identifier",
                tool.tool_id
            ));
        }
        if !api_names.insert(api.api_name.as_str()) {
            return Err(format!("{at}: duplicate api_name"));
        }
        let mut param_names = HashSet::new();
        for p in &api.params {
            if p.name.is_empty() {
                return Err(format!("{at}: parameter name must be nonempty"));
            }
            if !param_names.insert(p.name.as_str()) {
                return Err(format!("{at}: duplicate parameter `{}`", p.name));
            }
            if p.location == ParamLocation::Path && !p.required {
                return Err(format!("{at}: path parameter `{}` must be required", p.name));
            }
        }
        let slots = template_slots(&api.endpoint_template);
        let mut seen_slots = HashSet::new();
        for slot in &slots {
            if !seen_slots.insert(slot.as_str()) {
                return Err(format!("{at}: endpoint slot `{{{slot}}}` appears twice"));
            }
            match api.param(slot) {
                Some(p) if p.location == ParamLocation::Path => {}
                _ => {
                    return Err(format!(
                        "{at}: endpoint slot `{{{slot}}}` has no matching path parameter"
                    ))
                }
            }
        }
        for p in api.params.iter().filter(|p| p.location == ParamLocation::Path) {
            if !seen_slots.contains(p.name.as_str()) {
                return Err(format!(
                    "{at}: path parameter `{}` has no slot in endpoint_template",
                    p.name
                ));
            }
        }
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, CorpusError> {
    fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse_line(line_no: usize, line: &str) -> Result<Value, CorpusError> {
    serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: format!("malformed JSON: {e}"),
    })
}

fn check_unknown(
    line_no: usize,
    unknown: Vec<String>,
    opts: LoadOptions,
    warnings: &mut Vec<String>,
) -> Result<(), CorpusError> {
    if unknown.is_empty() {
        return Ok(());
    }
    if opts.permissive {
        warnings.extend(unknown.into_iter().map(|u| format!("line {line_no}: {u}")));
        Ok(())
    } else {
        Err(CorpusError::Validation {
            line: line_no,
            message: unknown.join("; "),
        })
    }
}

/// Parses tools.jsonl text. Blank lines are skipped.
pub fn parse_corpus(text: &str, opts: LoadOptions) -> Result<Corpus, CorpusError> {
    let mut corpus = Corpus::default();
    let mut first_seen = BTreeMap::new();
    let mut warnings = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value = parse_line(line_no, line)?;
        check_unknown(line_no, tool_unknown_fields(&value), opts, &mut warnings)?;
        let tool: ToolSpec = serde_json::from_value(value).map_err(|e| CorpusError::Validation {
            line: line_no,
            message: e.to_string(),
        })?;
        corpus.insert(tool, line_no, &mut first_seen)?;
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    corpus.warnings = warnings;
    Ok(corpus)
}

pub fn load_corpus(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Corpus, CorpusError> {
    parse_corpus(&read(path.as_ref())?, opts)
}

#[derive(Deserialize)]
struct RawLabel {
    tool_id: String,
    #[serde(default)]
    api_name: Option<String>,
}

#[derive(Deserialize)]
struct RawQuery {
    query_id: String,
    text: String,
    #[serde(default)]
    relevant: Vec<RawLabel>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<QueryRecord>,
    pub warnings: Vec<String>,
}

/// Parses queries.jsonl text against a loaded corpus.
///
/// A label without `api_name` is a tool-level label and expands to one pair
/// per API of that tool.
pub fn parse_queries(text: &str, corpus: &Corpus, opts: LoadOptions) -> Result<QuerySet, CorpusError> {
    let mut set = QuerySet::default();
    let mut dangling = Vec::new();
    let mut ids = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value = parse_line(line_no, line)?;
        let mut unknown = Vec::new();
        unknown_fields(&value, QUERY_FIELDS, "query", &mut unknown);
        if let Some(labels) = value.get("relevant").and_then(Value::as_array) {
            for (i, l) in labels.iter().enumerate() {
                unknown_fields(l, LABEL_FIELDS, &format!("relevant[{i}]"), &mut unknown);
            }
        }
        check_unknown(line_no, unknown, opts, &mut set.warnings)?;
        let raw: RawQuery = serde_json::from_value(value).map_err(|e| CorpusError::Validation {
            line: line_no,
            message: e.to_string(),
        })?;
        if raw.text.trim().is_empty() {
            return Err(CorpusError::Validation {
                line: line_no,
                message: format!("query `{}`: text must be nonempty", raw.query_id),
            });
        }
        if !ids.insert(raw.query_id.clone()) {
            return Err(CorpusError::Validation {
                line: line_no,
                message: format!("duplicate query_id `{}`", raw.query_id),
            });
        }
        let mut relevant = BTreeSet::new();
        for label in raw.relevant {
            let Some(tool) = corpus.get(&label.tool_id) else {
                dangling.push((raw.query_id.clone(), label.tool_id));
                continue;
            };
            match label.api_name {
                Some(api_name) if tool.api(&api_name).is_some() => {
                    relevant.insert(ToolKey::new(&tool.tool_id, api_name));
                }
                Some(api_name) => {
                    dangling.push((raw.query_id.clone(), format!("{}.{api_name}", tool.tool_id)));
                }
                None => {
                    relevant.extend(tool.apis.iter().map(|a| ToolKey::new(&tool.tool_id, &a.api_name)));
                }
            }
        }
        set.queries.push(QueryRecord {
            query_id: raw.query_id,
            text: raw.text,
            relevant,
        });
    }
    if !dangling.is_empty() {
        return Err(CorpusError::UnknownLabels(dangling));
    }
    if set.queries.is_empty() {
        set.warnings.push("query file contains no queries".into());
    }
    for w in &set.warnings {
        tracing::warn!("{w}");
    }
    Ok(set)
}

pub fn load_queries(path: impl AsRef<Path>, corpus: &Corpus, opts: LoadOptions) -> Result<QuerySet, CorpusError> {
    parse_queries(&read(path.as_ref())?, corpus, opts)
}

/// Serializes queries back to queries.jsonl form (API-level labels).
pub fn queries_to_jsonl(queries: &[QueryRecord]) -> String {
    let mut out = String::new();
    for q in queries {
        out.push_str(&serde_json::to_string(q).expect("query serializes"));
        out.push('\n');
    }
    out
}
