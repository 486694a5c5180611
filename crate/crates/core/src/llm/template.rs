use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ApiSpec, ToolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptRole {
    Planner,
    Simulator,
    Evaluator,
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptRole::Planner => "planner",
            PromptRole::Simulator => "simulator",
            PromptRole::Evaluator => "evaluator",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("unbound placeholder {0}")]
    Unbound(String),
    #[error("{role} template is missing required placeholder {{{placeholder}}}")]
    MissingPlaceholder { role: PromptRole, placeholder: String },
    #[error("evaluator template must ask for a JSON list of [Tool, API] pairs")]
    EvaluatorFormat,
    #[error("failed to read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Literal(String),
    Placeholder(String),
}

/// A prompt with `{name}` placeholders. Braces that do not enclose a bare
/// identifier (JSON examples, for instance) are literal text.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub role: PromptRole,
    pub template: String,
    segments: Vec<Segment>,
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn parse_segments(template: &str) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut literal = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        literal.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_ident(&after[..close]) => {
                if !literal.is_empty() {
                    segments.push(Segment::Literal(std::mem::take(&mut literal)));
                }
                segments.push(Segment::Placeholder(after[..close].to_string()));
                rest = &after[close + 1..];
            }
            _ => {
                literal.push('{');
                rest = after;
            }
        }
    }
    literal.push_str(rest);
    if !literal.is_empty() {
        segments.push(Segment::Literal(literal));
    }
    segments
}

impl PromptTemplate {
    pub fn new(role: PromptRole, template: impl Into<String>) -> Result<Self, TemplateError> {
        let template = template.into();
        let segments = parse_segments(&template);
        let t = Self {
            role,
            template,
            segments,
        };
        t.check_contract()?;
        Ok(t)
    }

    pub fn placeholders(&self) -> BTreeSet<&str> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Placeholder(p) => Some(p.as_str()),
                Segment::Literal(_) => None,
            })
            .collect()
    }

    fn check_contract(&self) -> Result<(), TemplateError> {
        let required: &[&str] = match self.role {
            PromptRole::Planner => &["query", "api_spec"],
            PromptRole::Simulator => &["api_call", "query"],
            PromptRole::Evaluator => &["query", "candidates"],
        };
        let present = self.placeholders();
        for p in required {
            if !present.contains(p) {
                return Err(TemplateError::MissingPlaceholder {
                    role: self.role,
                    placeholder: (*p).to_string(),
                });
            }
        }
        if self.role == PromptRole::Evaluator
            && !(self.template.contains("JSON list") && self.template.contains("[Tool, API]"))
        {
            return Err(TemplateError::EvaluatorFormat);
        }
        Ok(())
    }

    /// Substitutes every placeholder in one pass. Bound values are inserted
    /// verbatim and never re-expanded.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.template.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(p) => match bindings.get(p.as_str()) {
                    Some(v) => out.push_str(v),
                    None => return Err(TemplateError::Unbound(p.clone())),
                },
            }
        }
        Ok(out)
    }
}

/// The three templates used by the trial workflow.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub planner: PromptTemplate,
    pub simulator: PromptTemplate,
    pub evaluator: PromptTemplate,
}

pub const PROMPTS_VERSION: &str = "v1";

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            planner: PromptTemplate::new(PromptRole::Planner, include_str!("../../prompts/v1/planner.txt"))
                .expect("bundled planner template"),
            simulator: PromptTemplate::new(PromptRole::Simulator, include_str!("../../prompts/v1/simulator.txt"))
                .expect("bundled simulator template"),
            evaluator: PromptTemplate::new(PromptRole::Evaluator, include_str!("../../prompts/v1/evaluator.txt"))
                .expect("bundled evaluator template"),
        }
    }
}

impl PromptSet {
    /// Loads `planner.txt`, `simulator.txt` and `evaluator.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, TemplateError> {
        let load = |role: PromptRole| {
            let path = dir.join(format!("{role}.txt"));
            let text = fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            PromptTemplate::new(role, text)
        };
        Ok(Self {
            planner: load(PromptRole::Planner)?,
            simulator: load(PromptRole::Simulator)?,
            evaluator: load(PromptRole::Evaluator)?,
        })
    }

    pub fn get(&self, role: PromptRole) -> &PromptTemplate {
        match role {
            PromptRole::Planner => &self.planner,
            PromptRole::Simulator => &self.simulator,
            PromptRole::Evaluator => &self.evaluator,
        }
    }
}

/// Plain-text API description used inside planner and simulator prompts.
pub fn describe_api(tool: &ToolSpec, api: &ApiSpec) -> String {
    let mut s = format!(
        "API: {}.{}\nTool: {} ({})\nDescription: {}\nMethod: {}\n",
        tool.tool_id, api.api_name, tool.name, tool.description, api.description, api.method
    );
    if api.requires_auth {
        s.push_str("Authentication: bearer token required\n");
    }
    if api.params.is_empty() {
        s.push_str("Parameters: none\n");
    } else {
        s.push_str("Parameters:\n");
        for p in &api.params {
            let req = if p.required { "required" } else { "optional" };
            s.push_str(&format!(
                "- {} ({}, {req}, in {}): {}\n",
                p.name, p.kind, p.location, p.description
            ));
        }
    }
    s
}
