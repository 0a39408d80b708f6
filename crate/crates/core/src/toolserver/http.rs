use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::engine::ToolExecutor;
use super::{ToolError, ToolResult};
use crate::modelclient::{ClientError, Endpoint, Unavailable};
use crate::protocol::{ToolCall, ToolName};

/// Body of `POST /tools/{name}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub query_list: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

type Shared = Arc<dyn ToolExecutor>;

fn status_of(err: &ToolError) -> StatusCode {
    match err {
        ToolError::MissingArguments(_) => StatusCode::BAD_REQUEST,
        ToolError::UnknownTool(_) => StatusCode::NOT_FOUND,
        ToolError::ImageUnreadable(_) => StatusCode::UNPROCESSABLE_ENTITY,
        ToolError::BackendUnparseable { .. } => StatusCode::BAD_GATEWAY,
        ToolError::BackendUnavailable { .. }
        | ToolError::IndexMissing(_)
        | ToolError::EmbeddingFailure { .. } => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn error_response(err: ToolError) -> Response {
    (status_of(&err), Json(json!({"error": err.to_string()}))).into_response()
}

fn parse_request(name: &str, body: &[u8]) -> Result<(ToolCall, Option<String>), ToolError> {
    let name = ToolName::from_str(name).map_err(|_| ToolError::UnknownTool(name.to_string()))?;
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ToolError::MissingArguments(format!("malformed JSON: {e}")))?;
    let req: ToolRequest =
        serde_json::from_value(value).map_err(|e| ToolError::MissingArguments(e.to_string()))?;
    let call = ToolCall::new(name, req.query_list)
        .map_err(|e| ToolError::MissingArguments(e.to_string()))?;
    Ok((call, req.image))
}

async fn run_tool(State(tools): State<Shared>, Path(name): Path<String>, body: Bytes) -> Response {
    let (call, image) = match parse_request(&name, &body) {
        Ok(v) => v,
        Err(e) => return error_response(e),
    };
    let joined = tokio::task::spawn_blocking(move || tools.execute(&call, image.as_deref())).await;
    match joined {
        Ok(Ok(result)) => Json(result).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({"error": e.to_string()})),
        )
            .into_response(),
    }
}

async fn healthz() -> &'static str {
    "ok"
}

/// `POST /tools/{name}` and `GET /healthz` over a shared executor.
pub fn router(tools: Shared) -> Router {
    Router::new()
        .route("/tools/{name}", post(run_tool))
        .route("/healthz", get(healthz))
        .with_state(tools)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(tools: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("tool server listening on {}", listener.local_addr()?);
    axum::serve(listener, router(tools)).await
}

/// Tool client for a remote tool server.
#[derive(Debug, Clone)]
pub struct HttpTools {
    endpoint: Endpoint,
    agent: ureq::Agent,
}

impl HttpTools {
    pub fn new(endpoint: Endpoint) -> Result<Self, ToolError> {
        endpoint
            .validate()
            .map_err(|e| ToolError::InvalidConfig(e.to_string()))?;
        let agent = endpoint.agent();
        Ok(Self { endpoint, agent })
    }
}

impl ToolExecutor for HttpTools {
    fn execute(&self, call: &ToolCall, image: Option<&str>) -> Result<ToolResult, ToolError> {
        let req = ToolRequest {
            query_list: call.query_list.clone(),
            image: image.map(str::to_string),
        };
        let url = self.endpoint.url(&format!("tools/{}", call.name));
        let query = call.query_list.join(" | ");
        let bearer = self
            .endpoint
            .bearer()
            .map_err(|source| ToolError::BackendUnavailable {
                query: query.clone(),
                source,
            })?;
        let body = serde_json::to_value(&req).expect("request serializes");
        match crate::modelclient::post_json(&self.agent, &url, bearer.as_deref(), &body) {
            Ok(v) => serde_json::from_value(v).map_err(|e| ToolError::BackendUnparseable {
                query,
                detail: e.to_string(),
            }),
            Err(ClientError::BackendUnavailable(Unavailable::Status { code: 400, body })) => {
                Err(ToolError::MissingArguments(body))
            }
            Err(ClientError::BackendUnavailable(Unavailable::Status { code: 404, .. })) => {
                Err(ToolError::UnknownTool(call.name.to_string()))
            }
            Err(ClientError::MalformedResponse(detail)) => {
                Err(ToolError::BackendUnparseable { query, detail })
            }
            Err(source) => Err(ToolError::BackendUnavailable { query, source }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelclient::HashEmbedder;
    use crate::toolserver::{CorpusIndex, RetrievalConfig, SearchEngine, TextDoc, TextIndex};

    fn start() -> (String, tokio::runtime::Runtime) {
        let emb = HashEmbedder::default();
        let docs = vec![TextDoc {
            doc_id: None,
            title: "x".into(),
            body: "x marks the spot".into(),
            url: None,
        }];
        let (text, _) = TextIndex::build(&docs, &emb).unwrap();
        let index = CorpusIndex {
            dim: 64,
            doc_count: 1,
            text: Some(text),
            images: None,
        };
        let engine = SearchEngine::new(index, Arc::new(emb), RetrievalConfig::train()).unwrap();
        let rt = tokio::runtime::Runtime::new().unwrap();
        let listener = rt
            .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
            .unwrap();
        let addr = listener.local_addr().unwrap();
        let app = router(Arc::new(engine));
        rt.spawn(async move { axum::serve(listener, app).await });
        (format!("http://{addr}"), rt)
    }

    fn post(url: &str, body: &str) -> (u16, String) {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        let mut resp = agent
            .post(url)
            .header("content-type", "application/json")
            .send(body)
            .unwrap();
        let code = resp.status().as_u16();
        (code, resp.body_mut().read_to_string().unwrap())
    }

    #[test]
    fn http_status_mapping() {
        let (base, _rt) = start();
        let (code, body) = post(
            &format!("{base}/tools/text_search"),
            r#"{"query_list":["x"]}"#,
        );
        assert_eq!(code, 200);
        let r: ToolResult = serde_json::from_str(&body).unwrap();
        assert_eq!(r.per_query[0].hits.len(), 1);
        assert_eq!(
            post(&format!("{base}/tools/nope"), r#"{"query_list":["x"]}"#).0,
            404
        );
        assert_eq!(post(&format!("{base}/tools/text_search"), "{}").0, 400);
        assert_eq!(
            post(&format!("{base}/tools/text_search"), "not json").0,
            400
        );
        assert_eq!(
            post(
                &format!("{base}/tools/image_search_by_text_query"),
                r#"{"query_list":["x"]}"#
            )
            .0,
            503
        );
        let mut resp = ureq::get(&format!("{base}/healthz")).call().unwrap();
        assert_eq!(resp.body_mut().read_to_string().unwrap(), "ok");
    }

    #[test]
    fn http_client_round_trip() {
        let (base, _rt) = start();
        let tools = HttpTools::new(Endpoint::new(base, "")).unwrap();
        let call = ToolCall::new(ToolName::TextSearch, vec!["spot".into()]).unwrap();
        let r = tools.execute(&call, None).unwrap();
        assert_eq!(r.tool, ToolName::TextSearch);
        let call = ToolCall::new(ToolName::ImageSearchByTextQuery, vec!["spot".into()]).unwrap();
        assert!(matches!(
            tools.execute(&call, None),
            Err(ToolError::BackendUnavailable { .. })
        ));
    }
}
