use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// The four search tools an agent may invoke.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolName {
    ImageSearchByTextQuery,
    ImageSearchByLens,
    TextSearch,
    ModelSearch,
}

impl ToolName {
    pub const ALL: [ToolName; 4] = [
        ToolName::ImageSearchByTextQuery,
        ToolName::ImageSearchByLens,
        ToolName::TextSearch,
        ToolName::ModelSearch,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ToolName::ImageSearchByTextQuery => "image_search_by_text_query",
            ToolName::ImageSearchByLens => "image_search_by_lens",
            ToolName::TextSearch => "text_search",
            ToolName::ModelSearch => "model_search",
        }
    }
}

impl fmt::Display for ToolName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ToolName {
    type Err = ToolCallError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ToolName::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ToolCallError::UnknownTool(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolCallError {
    #[error("unknown tool `{0}`")]
    UnknownTool(String),
    #[error("tool call is missing `arguments.query_list`")]
    MissingArguments,
    #[error("query_list is empty or contains a blank query")]
    EmptyQueryList,
    #[error("malformed tool-call JSON: {0}")]
    MalformedJson(String),
}

/// A validated tool invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: ToolName,
    pub query_list: Vec<String>,
}

#[derive(Serialize)]
struct WireArgs<'a> {
    query_list: &'a [String],
}

#[derive(Serialize)]
struct WireCall<'a> {
    name: &'a str,
    arguments: WireArgs<'a>,
}

impl ToolCall {
    pub fn new(name: ToolName, query_list: Vec<String>) -> Result<Self, ToolCallError> {
        check_queries(&query_list)?;
        Ok(Self { name, query_list })
    }

    /// `{"name": ..., "arguments": {"query_list": [...]}}` in compact form.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&WireCall {
            name: self.name.as_str(),
            arguments: WireArgs {
                query_list: &self.query_list,
            },
        })
        .expect("tool call serializes")
    }
}

fn check_queries(queries: &[String]) -> Result<(), ToolCallError> {
    if queries.is_empty() || queries.iter().any(|q| q.trim().is_empty()) {
        return Err(ToolCallError::EmptyQueryList);
    }
    Ok(())
}

/// Validates the inner text of a `<tool_call>` segment.
pub fn validate_tool_call(body: &str) -> Result<ToolCall, ToolCallError> {
    let value: Value = serde_json::from_str(body.trim())
        .map_err(|e| ToolCallError::MalformedJson(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ToolCallError::MalformedJson("expected a JSON object".into()))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| ToolCallError::MalformedJson("`name` must be a string".into()))?;
    let name = ToolName::from_str(name)?;
    let list = obj
        .get("arguments")
        .and_then(Value::as_object)
        .and_then(|args| args.get("query_list"))
        .and_then(Value::as_array)
        .ok_or(ToolCallError::MissingArguments)?;
    let queries = list
        .iter()
        .map(|q| {
            q.as_str()
                .map(str::to_string)
                .ok_or_else(|| ToolCallError::MalformedJson("queries must be strings".into()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    ToolCall::new(name, queries)
}
