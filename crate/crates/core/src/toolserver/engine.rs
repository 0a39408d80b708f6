use std::fmt::Write as _;
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use super::index::{CorpusIndex, ImageResolver};
use super::{Hit, LensFusion, QueryHits, RetrievalConfig, ToolError, ToolResult};
use crate::modelclient::{
    complete, embed, ChatTurn, ClientError, EmbedInput, EmbeddingProvider, ModelClient,
};
use crate::protocol::{neutralize_tags, ToolCall, ToolName};
use crate::vector::mean_direction;

/// System prompt for the knowledge-based expert behind `model_search`.
pub const EXPERT_SYSTEM: &str =
    "You are a knowledgeable assistant. Answer the question concisely and factually.";

/// Anything that can run the agent's tool calls.
pub trait ToolExecutor: Send + Sync {
    /// `image` is the question image, needed by `image_search_by_lens`.
    fn execute(&self, call: &ToolCall, image: Option<&str>) -> Result<ToolResult, ToolError>;
}

impl<T: ToolExecutor + ?Sized> ToolExecutor for Arc<T> {
    fn execute(&self, call: &ToolCall, image: Option<&str>) -> Result<ToolResult, ToolError> {
        (**self).execute(call, image)
    }
}

/// In-process search engine over a loaded [`CorpusIndex`]. Immutable once built.
pub struct SearchEngine {
    pub index: CorpusIndex,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub resolver: ImageResolver,
    pub expert: Option<Arc<dyn ModelClient>>,
    pub expert_deadline: Duration,
    pub cfg: RetrievalConfig,
}

fn head(text: &str, words: usize) -> String {
    text.split_whitespace()
        .take(words)
        .collect::<Vec<_>>()
        .join(" ")
}

impl SearchEngine {
    pub fn new(
        index: CorpusIndex,
        embedder: Arc<dyn EmbeddingProvider>,
        cfg: RetrievalConfig,
    ) -> Result<Self, ToolError> {
        cfg.validate()?;
        Ok(Self {
            index,
            embedder,
            resolver: ImageResolver::default(),
            expert: None,
            expert_deadline: Duration::from_secs(60),
            cfg,
        })
    }

    pub fn with_resolver(mut self, resolver: ImageResolver) -> Self {
        self.resolver = resolver;
        self
    }

    pub fn with_expert(mut self, expert: Arc<dyn ModelClient>, deadline: Duration) -> Self {
        self.expert = Some(expert);
        self.expert_deadline = deadline;
        self
    }

    fn embed_queries(&self, queries: &[String]) -> Result<Vec<Vec<f32>>, ToolError> {
        if queries.is_empty() {
            return Err(ToolError::MissingArguments("query_list is empty".into()));
        }
        embed(self.embedder.as_ref(), &EmbedInput::Texts(queries.to_vec()))
            .map_err(|source| ToolError::EmbeddingFailure { doc: None, source })
    }

    pub fn search_text(&self, queries: &[String]) -> Result<ToolResult, ToolError> {
        let text = self.index.text()?;
        let vectors = self.embed_queries(queries)?;
        let per_query = queries
            .iter()
            .zip(vectors)
            .map(|(q, v)| QueryHits {
                query: q.clone(),
                hits: text
                    .rank(&v, self.cfg.text_top_k)
                    .into_iter()
                    .map(|(pos, score)| {
                        let p = &text.passages[pos];
                        Hit {
                            id: p.passage_id.to_string(),
                            score,
                            title: Some(p.title.clone()),
                            caption: None,
                            snippet: Some(head(&p.body, self.cfg.snippet_words)),
                            uri: p.source_url.clone(),
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(ToolResult {
            tool: ToolName::TextSearch,
            per_query,
        })
    }

    fn image_hits(&self, query: &[f32]) -> Result<Vec<Hit>, ToolError> {
        let images = self.index.images()?;
        Ok(images
            .rank(query, self.cfg.image_sim_threshold, self.cfg.image_top_k)
            .into_iter()
            .map(|(pos, score)| {
                let e = &images.images[pos];
                Hit {
                    id: e.image_id.clone(),
                    score,
                    title: None,
                    caption: e.caption.clone(),
                    snippet: None,
                    uri: Some(e.uri.clone()),
                }
            })
            .collect())
    }

    pub fn search_image_by_text(&self, queries: &[String]) -> Result<ToolResult, ToolError> {
        self.index.images()?;
        let vectors = self.embed_queries(queries)?;
        let per_query = queries
            .iter()
            .zip(vectors)
            .map(|(q, v)| {
                Ok(QueryHits {
                    query: q.clone(),
                    hits: self.image_hits(&v)?,
                })
            })
            .collect::<Result<_, ToolError>>()?;
        Ok(ToolResult {
            tool: ToolName::ImageSearchByTextQuery,
            per_query,
        })
    }

    /// Embeds the question image and ranks the image index. Each refinement
    /// query is fused with the image vector separately; with no queries a
    /// single entry with query `""` is returned.
    pub fn search_image_by_image(
        &self,
        image: &str,
        queries: &[String],
    ) -> Result<ToolResult, ToolError> {
        self.index.images()?;
        let bytes = self.resolver.read(image)?;
        let image_vec = embed(self.embedder.as_ref(), &EmbedInput::Image(bytes))
            .map_err(|source| ToolError::EmbeddingFailure {
                doc: Some(image.to_string()),
                source,
            })?
            .pop()
            .expect("one vector per image");
        let per_query = if queries.is_empty() || self.cfg.lens_fusion == LensFusion::ImageOnly {
            let label = queries.first().cloned().unwrap_or_default();
            vec![QueryHits {
                query: label,
                hits: self.image_hits(&image_vec)?,
            }]
        } else {
            let vectors = self.embed_queries(queries)?;
            queries
                .iter()
                .zip(vectors)
                .map(|(q, v)| {
                    let fused =
                        mean_direction(&[&image_vec, &v]).unwrap_or_else(|| image_vec.clone());
                    Ok(QueryHits {
                        query: q.clone(),
                        hits: self.image_hits(&fused)?,
                    })
                })
                .collect::<Result<_, ToolError>>()?
        };
        Ok(ToolResult {
            tool: ToolName::ImageSearchByLens,
            per_query,
        })
    }

    fn ask_expert(&self, expert: &Arc<dyn ModelClient>, query: &str) -> Result<String, ToolError> {
        let (tx, rx) = mpsc::channel();
        let client = Arc::clone(expert);
        let turns = vec![ChatTurn::system(EXPERT_SYSTEM), ChatTurn::user(query)];
        thread::spawn(move || {
            let _ = tx.send(complete(client.as_ref(), &turns, &[]));
        });
        let reply = match rx.recv_timeout(self.expert_deadline) {
            Ok(r) => r,
            Err(_) => Err(ClientError::Timeout),
        };
        let reply = reply.map_err(|source| ToolError::BackendUnavailable {
            query: query.to_string(),
            source,
        })?;
        if reply.trim().is_empty() {
            return Err(ToolError::BackendUnparseable {
                query: query.to_string(),
                detail: "empty reply".into(),
            });
        }
        Ok(reply)
    }

    /// Forwards each query to the expert; replies become hits verbatim.
    pub fn model_search(&self, queries: &[String]) -> Result<ToolResult, ToolError> {
        let expert = self
            .expert
            .as_ref()
            .ok_or_else(|| ToolError::InvalidConfig("no expert endpoint configured".into()))?;
        if queries.is_empty() {
            return Err(ToolError::MissingArguments("query_list is empty".into()));
        }
        let per_query = queries
            .iter()
            .enumerate()
            .map(|(i, q)| {
                Ok(QueryHits {
                    query: q.clone(),
                    hits: vec![Hit {
                        id: format!("model:{i}"),
                        score: 1.0,
                        title: None,
                        caption: None,
                        snippet: Some(self.ask_expert(expert, q)?),
                        uri: None,
                    }],
                })
            })
            .collect::<Result<_, ToolError>>()?;
        Ok(ToolResult {
            tool: ToolName::ModelSearch,
            per_query,
        })
    }
}

impl ToolExecutor for SearchEngine {
    fn execute(&self, call: &ToolCall, image: Option<&str>) -> Result<ToolResult, ToolError> {
        match call.name {
            ToolName::TextSearch => self.search_text(&call.query_list),
            ToolName::ImageSearchByTextQuery => self.search_image_by_text(&call.query_list),
            ToolName::ImageSearchByLens => {
                let image = image.ok_or_else(|| {
                    ToolError::MissingArguments(
                        "image_search_by_lens needs the question image".into(),
                    )
                })?;
                self.search_image_by_image(image, &call.query_list)
            }
            ToolName::ModelSearch => self.model_search(&call.query_list),
        }
    }
}

/// Text form of a tool result as inserted into a `<tool_response>` segment.
/// Tag-like text from the corpus is escaped so it cannot close the segment.
pub fn render_tool_result(result: &ToolResult) -> String {
    let mut out = String::new();
    for (qi, q) in result.per_query.iter().enumerate() {
        if qi > 0 {
            out.push('\n');
        }
        let _ = writeln!(out, "Query: {}", q.query);
        if q.hits.is_empty() {
            out.push_str("No results.\n");
        }
        for (i, h) in q.hits.iter().enumerate() {
            let _ = write!(out, "{}. [{}] score={:.4}", i + 1, h.id, h.score);
            if let Some(t) = &h.title {
                let _ = write!(out, " title: {t}");
            }
            if let Some(c) = &h.caption {
                let _ = write!(out, " caption: {c}");
            }
            if let Some(u) = &h.uri {
                let _ = write!(out, " uri: {u}");
            }
            out.push('\n');
            if let Some(s) = &h.snippet {
                let _ = writeln!(out, "   {s}");
            }
        }
    }
    neutralize_tags(out.trim_end())
}
