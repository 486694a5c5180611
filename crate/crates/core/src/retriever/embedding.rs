use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::ToolKey;

use super::RetrieveError;

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for an embedding endpoint speaking
/// `POST {"texts": [...]}` -> `{"vectors": [[...], ...]}`.
#[derive(Debug, Clone)]
pub struct EmbeddingClient {
    url: String,
    http: reqwest::Client,
}

/// Maps cosine similarity from [-1, 1] onto [0, 1].
pub fn cosine_to_unit(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.5;
    }
    ((dot / (na * nb)).clamp(-1.0, 1.0) + 1.0) / 2.0
}

impl EmbeddingClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self, RetrieveError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| RetrieveError::Embedding(e.to_string()))?;
        Ok(Self { url: url.into(), http })
    }

    pub async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, RetrieveError> {
        let resp = self
            .http
            .post(&self.url)
            .json(&EmbedRequest { texts })
            .send()
            .await
            .map_err(|e| RetrieveError::Embedding(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RetrieveError::Embedding(format!("HTTP {}", status.as_u16())));
        }
        let body: EmbedResponse = resp
            .json()
            .await
            .map_err(|e| RetrieveError::Embedding(format!("bad response body: {e}")))?;
        if body.vectors.len() != texts.len() {
            return Err(RetrieveError::Embedding(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        Ok(body.vectors)
    }

    /// Dense scores for each document against the query, in [0, 1].
    pub async fn dense_scores(
        &self,
        query: &str,
        docs: &[(ToolKey, String)],
    ) -> Result<BTreeMap<ToolKey, f64>, RetrieveError> {
        let mut texts = Vec::with_capacity(docs.len() + 1);
        texts.push(query.to_string());
        texts.extend(docs.iter().map(|(_, t)| t.clone()));
        let vectors = self.embed(&texts).await?;
        let (q, rest) = vectors.split_first().expect("query vector present");
        Ok(docs
            .iter()
            .zip(rest)
            .map(|((key, _), v)| (key.clone(), cosine_to_unit(q, v)))
            .collect())
    }
}
