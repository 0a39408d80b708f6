//! Offline search engine: corpus ingestion, exact dense retrieval, and the
//! four agent tools served in-process or over HTTP.

mod chunk;
mod engine;
mod http;
mod index;
mod topk;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelclient::ClientError;
use crate::protocol::{ToolCall, ToolName};

pub use chunk::{chunk_words, PASSAGE_WORDS};
pub use engine::{render_tool_result, SearchEngine, ToolExecutor, EXPERT_SYSTEM};
pub use http::{router, serve, HttpTools, ToolRequest};
pub use index::{
    CorpusIndex, ImageDoc, ImageEntry, ImageIndex, ImageResolver, IngestStats, TextDoc, TextIndex,
    TextPassage,
};
pub use topk::top_k;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// How `image_search_by_lens` combines the question image with refinement queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LensFusion {
    /// Mean of the unit image and query vectors, re-normalized.
    #[default]
    Mean,
    /// Ignore refinement queries.
    ImageOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub text_top_k: usize,
    /// Images must score strictly above this cosine similarity.
    pub image_sim_threshold: f64,
    pub image_top_k: usize,
    pub mode: Mode,
    #[serde(default)]
    pub lens_fusion: LensFusion,
    #[serde(default = "default_snippet_words")]
    pub snippet_words: usize,
}

fn default_snippet_words() -> usize {
    50
}

impl RetrievalConfig {
    /// Training defaults: top-3 passages, one image above 0.7.
    pub fn train() -> Self {
        Self {
            text_top_k: 3,
            image_sim_threshold: 0.7,
            image_top_k: 1,
            mode: Mode::Train,
            lens_fusion: LensFusion::Mean,
            snippet_words: default_snippet_words(),
        }
    }

    /// Evaluation defaults: top-5 passages, up to three images above 0.7.
    pub fn eval() -> Self {
        Self {
            text_top_k: 5,
            image_top_k: 3,
            mode: Mode::Eval,
            ..Self::train()
        }
    }

    pub fn for_mode(mode: Mode) -> Self {
        match mode {
            Mode::Train => Self::train(),
            Mode::Eval => Self::eval(),
        }
    }

    pub fn validate(&self) -> Result<(), ToolError> {
        if self.text_top_k == 0 {
            return Err(ToolError::InvalidConfig("text_top_k must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.image_sim_threshold) {
            return Err(ToolError::InvalidConfig(
                "image_sim_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self::train()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryHits {
    pub query: String,
    pub hits: Vec<Hit>,
}

/// Wire form of one tool response. Hits are sorted by score descending, ties
/// by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub tool: ToolName,
    pub per_query: Vec<QueryHits>,
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error("{0} index is missing")]
    IndexMissing(&'static str),
    #[error("embedding failed{}: {source}", doc.as_ref().map(|d| format!(" for {d}")).unwrap_or_default())]
    EmbeddingFailure {
        doc: Option<String>,
        #[source]
        source: ClientError,
    },
    #[error("document `{0}` has an empty body")]
    EmptyDocument(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("image `{0}` cannot be read")]
    ImageUnreadable(String),
    #[error("expert backend unavailable for query `{query}`: {source}")]
    BackendUnavailable {
        query: String,
        #[source]
        source: ClientError,
    },
    #[error("expert backend reply unusable for query `{query}`: {detail}")]
    BackendUnparseable { query: String, detail: String },
    #[error("missing or invalid arguments: {0}")]
    MissingArguments(String),
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("index format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ToolError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ToolError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Convenience: the call plus the question image a lens call needs.
pub fn execute_call(
    tools: &dyn ToolExecutor,
    call: &ToolCall,
    image: Option<&str>,
) -> Result<ToolResult, ToolError> {
    tools.execute(call, image)
}
