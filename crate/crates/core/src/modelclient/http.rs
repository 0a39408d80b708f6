use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::retry::{with_retries, RetryPolicy};
use super::{ChatTurn, ClientError, ModelClient, Unavailable};

/// Where and how to reach a model backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub base_url: String,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Name of the environment variable holding a bearer token.
    #[serde(default)]
    pub auth_env: Option<String>,
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_max_retries() -> u32 {
    3
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            auth_env: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout_secs == 0 {
            return Err(ClientError::InvalidRequest("timeout must be > 0".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(ClientError::InvalidRequest("empty base_url".into()));
        }
        Ok(())
    }

    pub(crate) fn bearer(&self) -> Result<Option<String>, ClientError> {
        match &self.auth_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(|t| Some(format!("Bearer {t}")))
                .map_err(|_| ClientError::AuthMissing(var.clone())),
        }
    }

    pub(crate) fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            ..RetryPolicy::default()
        }
    }

    pub(crate) fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(self.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into()
    }

    pub(crate) fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// POSTs `body` as JSON and decodes a JSON reply, mapping transport and
/// status failures onto [`ClientError`].
pub(crate) fn post_json(
    agent: &ureq::Agent,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
) -> Result<Value, ClientError> {
    let mut req = agent.post(url);
    if let Some(b) = bearer {
        req = req.header("Authorization", b);
    }
    let mut resp = req.send_json(body).map_err(map_ureq)?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        return Err(ClientError::BackendUnavailable(Unavailable::Status {
            code: status,
            body,
        }));
    }
    resp.body_mut()
        .read_json::<Value>()
        .map_err(|e| ClientError::MalformedResponse(e.to_string()))
}

fn map_ureq(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Timeout(_) => ClientError::Timeout,
        other => ClientError::BackendUnavailable(Unavailable::Transport(other.to_string())),
    }
}

/// Chat-completion client: `POST {base_url}/chat/completions` with a
/// `messages` array, reading `choices[0].message.content`.
pub struct HttpChatClient {
    endpoint: Endpoint,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(endpoint: Endpoint) -> Result<Self, ClientError> {
        endpoint.validate()?;
        let agent = endpoint.agent();
        Ok(Self { endpoint, agent })
    }

    fn request_body(&self, turns: &[ChatTurn], stop: &[String]) -> Value {
        let messages: Vec<Value> = turns
            .iter()
            .map(|t| match &t.image {
                None => json!({"role": t.role.as_str(), "content": t.content}),
                Some(img) => json!({
                    "role": t.role.as_str(),
                    "content": [
                        {"type": "text", "text": t.content},
                        {"type": "image_url", "image_url": {"url": img}},
                    ],
                }),
            })
            .collect();
        let mut body = json!({"model": self.endpoint.model, "messages": messages});
        if !stop.is_empty() {
            body["stop"] = json!(stop);
        }
        body
    }
}

impl ModelClient for HttpChatClient {
    fn respond(&self, turns: &[ChatTurn], stop: &[String]) -> Result<String, ClientError> {
        let bearer = self.endpoint.bearer()?;
        let url = self.endpoint.url("chat/completions");
        let body = self.request_body(turns, stop);
        let reply = with_retries(self.endpoint.retry_policy(), || {
            post_json(&self.agent, &url, bearer.as_deref(), &body)
        })?;
        reply
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                ClientError::MalformedResponse("missing choices[0].message.content".into())
            })
    }
}
