use serde_json::Value;
use thiserror::Error;

/// Model output that contained no parseable JSON value.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("INVALID_JSON: {reason}")]
pub struct InvalidJson {
    pub reason: String,
}

fn fenced_blocks(text: &str) -> Vec<&str> {
    let mut blocks = Vec::new();
    let mut rest = text;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        // skip an info string such as `json`
        let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
        let body = &after[body_start..];
        match body.find("```") {
            Some(end) => {
                blocks.push(&body[..end]);
                rest = &body[end + 3..];
            }
            None => break,
        }
    }
    blocks
}

fn first_embedded_value(text: &str) -> Option<Value> {
    for (i, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(v)) = stream.next() {
            return Some(v);
        }
    }
    None
}

/// Extracts a JSON value from model output.
///
/// Tries, in order: the whole trimmed text, the first fenced code block that
/// parses, and the first `{`/`[` from which a complete value parses. Prose
/// around the value is ignored.
pub fn parse_json_payload(text: &str) -> Result<Value, InvalidJson> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(InvalidJson {
            reason: "empty output".into(),
        });
    }
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    for block in fenced_blocks(trimmed) {
        if let Ok(v) = serde_json::from_str::<Value>(block.trim()) {
            return Ok(v);
        }
    }
    first_embedded_value(trimmed).ok_or_else(|| {
        let preview: String = trimmed.chars().take(80).collect();
        InvalidJson {
            reason: format!("no JSON value in output: {preview:?}"),
        }
    })
}
