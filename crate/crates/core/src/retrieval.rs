//! Background-knowledge retrieval for knowledge-augmented detection.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub const KNOWLEDGE_HEADER: &str = "Background Knowledge:";
pub const DEFAULT_TOP_K: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPassage {
    #[serde(rename = "id")]
    pub passage_id: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrieverError {
    #[error("retriever transport error: {0}")]
    Transport(String),
    #[error("retriever returned HTTP {0}")]
    Status(u16),
    #[error("malformed retriever response: {0}")]
    Malformed(String),
    #[error("failed to load retrieval fixture: {0}")]
    Fixture(String),
}

/// Retriever entry in the endpoint registry (`[[retrievers]]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub id: String,
    pub url: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

pub fn build_query(task_input: &str, task_output: &str) -> String {
    format!("{task_input}\n{task_output}")
}

pub fn insert_knowledge(task_input: &str, passages: &[RetrievalPassage]) -> String {
    if passages.is_empty() {
        return task_input.to_string();
    }
    let body: Vec<&str> = passages.iter().map(|p| p.text.as_str()).collect();
    format!("{KNOWLEDGE_HEADER}\n{}\n\n{task_input}", body.join("\n\n"))
}

/// Sorts by descending score (stable) and keeps the first `k`.
fn finalize(mut passages: Vec<RetrievalPassage>, k: usize) -> Result<Vec<RetrievalPassage>, RetrieverError> {
    if let Some(bad) = passages.iter().find(|p| !p.score.is_finite()) {
        return Err(RetrieverError::Malformed(format!(
            "passage {} has non-finite score",
            bad.passage_id
        )));
    }
    passages.sort_by(|a, b| b.score.total_cmp(&a.score));
    passages.truncate(k);
    Ok(passages)
}

#[async_trait]
pub trait Retriever: Send + Sync {
    async fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalPassage>, RetrieverError>;
}

/// Client for `POST {url}/retrieve {query, k} -> {passages: [...]}`.
pub struct HttpRetriever {
    client: reqwest::Client,
    config: RetrieverConfig,
}

impl HttpRetriever {
    pub fn new(config: RetrieverConfig) -> Self {
        HttpRetriever {
            client: reqwest::Client::new(),
            config,
        }
    }
}

#[derive(Serialize)]
struct RetrieveBody<'a> {
    query: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct RetrieveResponse {
    passages: Vec<RetrievalPassage>,
}

#[async_trait]
impl Retriever for HttpRetriever {
    async fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalPassage>, RetrieverError> {
        let url = format!("{}/retrieve", self.config.url.trim_end_matches('/'));
        let mut req = self
            .client
            .post(url)
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .json(&RetrieveBody { query, k });
        if let Some(var) = &self.config.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| RetrieverError::Transport(format!("credential {var} is not set")))?;
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .await
            .map_err(|e| RetrieverError::Transport(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(RetrieverError::Status(resp.status().as_u16()));
        }
        let body: RetrieveResponse = resp
            .json()
            .await
            .map_err(|e| RetrieverError::Malformed(e.to_string()))?;
        finalize(body.passages, k)
    }
}

/// File-backed retriever: a JSON object `{"index": {query: [passages]}}`.
/// Records every query it receives.
pub struct FileRetriever {
    index: HashMap<String, Vec<RetrievalPassage>>,
    queries: Mutex<Vec<String>>,
}

#[derive(Deserialize)]
struct FixtureFile {
    index: HashMap<String, Vec<RetrievalPassage>>,
}

impl FileRetriever {
    pub fn new(index: HashMap<String, Vec<RetrievalPassage>>) -> Self {
        FileRetriever {
            index,
            queries: Mutex::new(Vec::new()),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, RetrieverError> {
        let text = std::fs::read_to_string(path).map_err(|e| RetrieverError::Fixture(e.to_string()))?;
        let file: FixtureFile =
            serde_json::from_str(&text).map_err(|e| RetrieverError::Fixture(e.to_string()))?;
        Ok(FileRetriever::new(file.index))
    }

    pub fn queries(&self) -> Vec<String> {
        self.queries.lock().clone()
    }
}

#[async_trait]
impl Retriever for FileRetriever {
    async fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalPassage>, RetrieverError> {
        self.queries.lock().push(query.to_string());
        finalize(self.index.get(query).cloned().unwrap_or_default(), k)
    }
}
