//! Uniform access to every model-backed capability.
//!
//! Chat-style backends implement [`ModelClient`]; embedding backends implement
//! [`EmbeddingProvider`]. Both have an HTTP implementation speaking a minimal
//! chat-completion / embedding JSON shape and deterministic offline stubs, so
//! every pipeline stage can run without network access.

mod embed;
mod http;
mod retry;
mod scripted;
pub mod stubs;
mod tasks;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{embed, EmbedInput, EmbeddingProvider, HashEmbedder, HttpEmbedder};
pub(crate) use http::post_json;
pub use http::{Endpoint, HttpChatClient};
pub use retry::{with_retries, RetryPolicy, Retrying};
pub use scripted::{fingerprint, render_turns, ScriptRule, ScriptedBackend};
pub use tasks::{
    annotate, annotate_batch, head_words, summarize_tool_response, word_count,
    DEFAULT_SUMMARY_BUDGET,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl ChatTurn {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            image: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(content: impl Into<String>) -> Self {
        Self::new(Role::Tool, content)
    }

    pub fn with_image(mut self, image: Option<String>) -> Self {
        self.image = image;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unavailable {
    Unscripted { fingerprint: String },
    Transport(String),
    Status { code: u16, body: String },
}

impl fmt::Display for Unavailable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unavailable::Unscripted { fingerprint } => {
                write!(f, "unscripted request {fingerprint}")
            }
            Unavailable::Transport(e) => write!(f, "transport: {e}"),
            Unavailable::Status { code, body } => write!(f, "HTTP {code}: {body}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(Unavailable),
    #[error("backend timed out")]
    Timeout,
    #[error("auth token variable `{0}` is not set")]
    AuthMissing(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unparseable backend response: {0}")]
    MalformedResponse(String),
    #[error("embedding width {got} does not match expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("backend returned a zero or non-finite vector")]
    DegenerateVector,
    #[error("backend returned an empty annotation")]
    EmptyAnnotation,
}

impl ClientError {
    /// Failures worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            ClientError::Timeout => true,
            ClientError::BackendUnavailable(Unavailable::Transport(_)) => true,
            ClientError::BackendUnavailable(Unavailable::Status { code, .. }) => {
                *code == 429 || *code >= 500
            }
            _ => false,
        }
    }
}

/// A chat-completion capable backend. Implementations return the backend text
/// verbatim; request validation happens in [`complete`].
pub trait ModelClient: Send + Sync {
    fn respond(&self, turns: &[ChatTurn], stop: &[String]) -> Result<String, ClientError>;
}

impl<T: ModelClient + ?Sized> ModelClient for std::sync::Arc<T> {
    fn respond(&self, turns: &[ChatTurn], stop: &[String]) -> Result<String, ClientError> {
        (**self).respond(turns, stop)
    }
}

impl<T: ModelClient + ?Sized> ModelClient for &T {
    fn respond(&self, turns: &[ChatTurn], stop: &[String]) -> Result<String, ClientError> {
        (**self).respond(turns, stop)
    }
}

/// Sends `turns` to `client`. The conversation must be non-empty and start
/// with a system turn, and every turn must carry content or an image.
pub fn complete(
    client: &dyn ModelClient,
    turns: &[ChatTurn],
    stop: &[String],
) -> Result<String, ClientError> {
    match turns.first() {
        None => return Err(ClientError::InvalidRequest("no turns".into())),
        Some(t) if t.role != Role::System => {
            return Err(ClientError::InvalidRequest(
                "first turn must be system".into(),
            ))
        }
        _ => {}
    }
    if let Some(i) = turns
        .iter()
        .position(|t| t.content.is_empty() && t.image.is_none())
    {
        return Err(ClientError::InvalidRequest(format!(
            "turn {i} has neither content nor image"
        )));
    }
    client.respond(turns, stop)
}

/// Content modality of a hypergraph node or annotation request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

/// Closure-backed client, used for logic stubs.
pub struct FnBackend<F>(pub F);

impl<F> ModelClient for FnBackend<F>
where
    F: Fn(&[ChatTurn]) -> Result<String, ClientError> + Send + Sync,
{
    fn respond(&self, turns: &[ChatTurn], _stop: &[String]) -> Result<String, ClientError> {
        (self.0)(turns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_requires_leading_system_turn() {
        let echo = FnBackend(|_: &[ChatTurn]| Ok("ok".to_string()));
        assert!(matches!(
            complete(&echo, &[], &[]),
            Err(ClientError::InvalidRequest(_))
        ));
        assert!(matches!(
            complete(&echo, &[ChatTurn::user("hi")], &[]),
            Err(ClientError::InvalidRequest(_))
        ));
        assert!(matches!(
            complete(&echo, &[ChatTurn::system("s"), ChatTurn::user("")], &[]),
            Err(ClientError::InvalidRequest(_))
        ));
        assert_eq!(
            complete(&echo, &[ChatTurn::system("s"), ChatTurn::user("hi")], &[]).unwrap(),
            "ok"
        );
    }

    #[test]
    fn transient_classification() {
        assert!(ClientError::Timeout.is_transient());
        assert!(ClientError::BackendUnavailable(Unavailable::Status {
            code: 503,
            body: String::new()
        })
        .is_transient());
        assert!(!ClientError::BackendUnavailable(Unavailable::Status {
            code: 400,
            body: String::new()
        })
        .is_transient());
        assert!(!ClientError::BackendUnavailable(Unavailable::Unscripted {
            fingerprint: "x".into()
        })
        .is_transient());
        assert!(!ClientError::AuthMissing("K".into()).is_transient());
    }
}
