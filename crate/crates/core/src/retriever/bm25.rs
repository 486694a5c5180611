use std::collections::HashMap;

use crate::corpus::{Corpus, ToolKey};

use super::{Candidate, CandidateList, RetrieveError};

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Document {
    key: ToolKey,
    term_freqs: HashMap<String, u32>,
    len: usize,
}

/// Inverted index over one document per `(tool, api)` pair. The document text
/// is the tool name, the tool description and the API description.
#[derive(Debug, Clone, PartialEq)]
pub struct Bm25Index {
    params: Bm25Params,
    docs: Vec<Document>,
    postings: HashMap<String, Vec<(usize, u32)>>,
    avg_len: f64,
}

pub fn document_text(tool_name: &str, tool_description: &str, api_description: &str) -> String {
    format!("{tool_name} {tool_description} {api_description}")
}

impl Bm25Index {
    pub fn build(corpus: &Corpus, params: Bm25Params) -> Result<Self, RetrieveError> {
        let docs = corpus
            .api_pairs()
            .map(|(tool, api)| {
                let text = document_text(&tool.name, &tool.description, &api.description);
                (ToolKey::new(&tool.tool_id, &api.api_name), text)
            })
            .collect::<Vec<_>>();
        Self::from_documents(docs, params)
    }

    pub fn from_documents(
        docs: impl IntoIterator<Item = (ToolKey, String)>,
        params: Bm25Params,
    ) -> Result<Self, RetrieveError> {
        let mut index = Bm25Index {
            params,
            docs: Vec::new(),
            postings: HashMap::new(),
            avg_len: 0.0,
        };
        let mut total_len = 0usize;
        for (key, text) in docs {
            let tokens = tokenize(&text);
            let mut term_freqs: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *term_freqs.entry(t.clone()).or_default() += 1;
            }
            let doc_id = index.docs.len();
            for (term, &tf) in &term_freqs {
                index.postings.entry(term.clone()).or_default().push((doc_id, tf));
            }
            total_len += tokens.len();
            index.docs.push(Document {
                key,
                term_freqs,
                len: tokens.len(),
            });
        }
        if index.docs.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        index.avg_len = total_len as f64 / index.docs.len() as f64;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn term_freq(&self, key: &ToolKey, term: &str) -> u32 {
        self.docs
            .iter()
            .find(|d| &d.key == key)
            .and_then(|d| d.term_freqs.get(term).copied())
            .unwrap_or(0)
    }

    /// Non-negative idf: `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Raw BM25 scores for every document with at least one query term.
    /// Repeated query terms count once.
    pub fn score_all(&self, query: &str) -> Result<Vec<(ToolKey, f64)>, RetrieveError> {
        let mut terms = tokenize(query);
        if terms.is_empty() {
            return Err(RetrieveError::EmptyQuery);
        }
        terms.sort();
        terms.dedup();
        let Bm25Params { k1, b } = self.params;
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in &terms {
            let Some(postings) = self.postings.get(term) else {
                continue;
            };
            let idf = self.idf(term);
            for &(doc_id, tf) in postings {
                let tf = f64::from(tf);
                let dl = self.docs[doc_id].len as f64;
                let norm = k1 * (1.0 - b + b * dl / self.avg_len);
                *scores.entry(doc_id).or_default() += idf * tf * (k1 + 1.0) / (tf + norm);
            }
        }
        Ok(scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(doc_id, s)| (self.docs[doc_id].key.clone(), s))
            .collect())
    }

    /// Top-k candidates by normalized sparse score. Documents with a zero
    /// score are never returned, so fewer than `k` may come back.
    pub fn retrieve(&self, query_id: &str, query: &str, k: usize) -> Result<CandidateList, RetrieveError> {
        if k == 0 {
            return Err(RetrieveError::ZeroK);
        }
        let scored = self.score_all(query)?;
        let norms = super::min_max(&scored.iter().map(|(_, s)| *s).collect::<Vec<_>>());
        let mut ranked: Vec<Candidate> = scored
            .into_iter()
            .zip(norms)
            .map(|((key, sparse), norm)| Candidate {
                tool_id: key.tool_id,
                api_name: key.api_name,
                sparse_score: sparse,
                sparse_norm: norm,
                dense_score: None,
                fused_score: norm,
            })
            .collect();
        super::sort_candidates(&mut ranked);
        ranked.truncate(k);
        Ok(CandidateList {
            query_id: query_id.to_string(),
            ranked,
            k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(docs: &[(&str, &str)]) -> Bm25Index {
        Bm25Index::from_documents(
            docs.iter()
                .map(|(id, text)| (ToolKey::new(*id, "api"), text.to_string())),
            Bm25Params::default(),
        )
        .unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("Get-Weather: ZIP_code 94103!"),
            ["get", "weather", "zip", "code", "94103"]
        );
        assert!(tokenize("  \t ").is_empty());
    }

    #[test]
    fn single_document_index() {
        let idx = index(&[("a", "hello world")]);
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn document_frequency_counts_documents() {
        let idx = index(&[("a", "flight search"), ("b", "flight flight booking"), ("c", "weather")]);
        assert_eq!(idx.doc_freq("flight"), 2);
        assert_eq!(idx.doc_freq("weather"), 1);
        assert_eq!(idx.doc_freq("missing"), 0);
    }

    #[test]
    fn rebuild_is_identical() {
        let docs = [("a", "flight search"), ("b", "hotel booking")];
        let x = index(&docs);
        let y = index(&docs);
        assert_eq!(x.avg_doc_len(), y.avg_doc_len());
        assert_eq!(x.doc_freq("flight"), y.doc_freq("flight"));
        assert_eq!(x.score_all("flight").unwrap(), y.score_all("flight").unwrap());
    }

    #[test]
    fn unique_term_ranks_its_document_first() {
        let idx = index(&[
            ("a", "weather forecast"),
            ("b", "stock quotes"),
            ("c", "news headlines"),
        ]);
        let list = idx.retrieve("q", "stock", 3).unwrap();
        assert_eq!(list.ranked.len(), 1);
        assert_eq!(list.ranked[0].tool_id, "b");
        assert_eq!(list.ranked[0].fused_score, 1.0);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let idx = index(&[("a", "weather")]);
        assert!(matches!(idx.retrieve("q", "   ", 3), Err(RetrieveError::EmptyQuery)));
        assert!(matches!(idx.retrieve("q", "weather", 0), Err(RetrieveError::ZeroK)));
        assert!(matches!(
            Bm25Index::from_documents(Vec::<(ToolKey, String)>::new(), Bm25Params::default()),
            Err(RetrieveError::EmptyCorpus)
        ));
    }
}
