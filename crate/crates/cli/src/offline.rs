//! Model backends: deterministic stubs under `--offline`, HTTP otherwise.

use std::sync::Arc;

use anyhow::{anyhow, Context};
use deepsearch_core::modelclient::stubs::{
    echo_annotator, exact_match_judge, link_extractor, normalize_answer, template_qa_generator,
};
use deepsearch_core::modelclient::{
    ChatTurn, ClientError, EmbeddingProvider, Endpoint, FnBackend, HashEmbedder, HttpChatClient,
    HttpEmbedder, ModelClient, Role,
};
use deepsearch_core::prompts::agent_user;
use deepsearch_core::protocol::{ToolCall, ToolName};

use crate::config::Settings;

/// The part of the opening user turn after the fixed preamble.
fn question_of(turns: &[ChatTurn]) -> Result<String, ClientError> {
    let user = turns
        .iter()
        .find(|t| t.role == Role::User)
        .ok_or_else(|| ClientError::InvalidRequest("no user turn".into()))?;
    let preamble = agent_user("");
    Ok(user
        .content
        .strip_prefix(&preamble)
        .unwrap_or(&user.content)
        .to_string())
}

/// First token that is exactly four digits once trailing punctuation is
/// dropped. Tokens break at whitespace and tag brackets.
fn first_year(text: &str) -> Option<&str> {
    text.split(|c: char| c.is_whitespace() || c == '<' || c == '>')
        .map(|t| t.trim_end_matches(['.', ',', ';', ':']))
        .find(|t| t.len() == 4 && t.bytes().all(|b| b.is_ascii_digit()))
}

/// The quoted part of a question, if any.
fn quoted(question: &str) -> Option<&str> {
    let (start, end) = (question.find('"')?, question.rfind('"')?);
    (end > start + 1).then(|| &question[start + 1..end])
}

/// Tool expert stub. With no tool response yet it calls its own tool on the
/// quoted part of the question, or the whole question. Afterwards it answers
/// with the first year following that quote in the latest response, else
/// the first year anywhere, else `unknown`.
pub fn offline_expert(tool: ToolName) -> impl ModelClient {
    FnBackend(move |turns: &[ChatTurn]| {
        let question = question_of(turns)?;
        let focus = quoted(&question).unwrap_or(&question).to_string();
        match turns.iter().rev().find(|t| t.role == Role::Tool) {
            None => {
                let call = ToolCall::new(tool, vec![focus])
                    .map_err(|e| ClientError::InvalidRequest(e.to_string()))?;
                Ok(format!(
                    "<think>I will look this up with {tool}.</think>\n<tool_call>{}</tool_call>",
                    call.to_json()
                ))
            }
            Some(resp) => {
                let text = &resp.content;
                let after = text.find(&focus).map(|i| &text[i..]);
                let answer = after
                    .and_then(first_year)
                    .or_else(|| first_year(text))
                    .unwrap_or("unknown");
                Ok(format!(
                    "<think>The results point to {answer}.</think>\n<answer>{answer}</answer>"
                ))
            }
        }
    })
}

fn field<'a>(prompt: &'a str, label: &str) -> &'a str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(label))
        .unwrap_or_default()
        .trim()
}

/// Filter judge stub: a pair is search-free when its answer already appears
/// in the question, and unverifiable when the answer is `unknown`. Every
/// other probe passes.
pub fn offline_filter_judge() -> impl ModelClient {
    FnBackend(|turns: &[ChatTurn]| {
        let prompt = &turns
            .last()
            .ok_or_else(|| ClientError::InvalidRequest("empty conversation".into()))?
            .content;
        let q = format!(" {} ", normalize_answer(field(prompt, "Question:")));
        let a = normalize_answer(field(prompt, "Answer:"));
        let no = if prompt.contains("[probe: search_necessity]") {
            !a.is_empty() && q.contains(&format!(" {a} "))
        } else if prompt.contains("[probe: verifiability]") {
            a.is_empty() || a == "unknown"
        } else {
            false
        };
        Ok(if no { "No" } else { "Yes" }.to_string())
    })
}

/// Chat backends for each role.
pub struct Backends {
    pub generator: Box<dyn ModelClient>,
    pub annotator: Box<dyn ModelClient>,
    pub extractor: Box<dyn ModelClient>,
    pub judge: Box<dyn ModelClient>,
    pub filter_judge: Box<dyn ModelClient>,
}

fn http(endpoint: &Option<Endpoint>, role: &str) -> anyhow::Result<Box<dyn ModelClient>> {
    let ep = endpoint
        .clone()
        .ok_or_else(|| anyhow!("no endpoint for {role}: configure endpoints or pass --offline"))?;
    Ok(Box::new(HttpChatClient::new(ep)?))
}

impl Backends {
    pub fn new(s: &Settings) -> anyhow::Result<Self> {
        if s.offline {
            return Ok(Self {
                generator: Box::new(template_qa_generator()),
                annotator: Box::new(echo_annotator()),
                extractor: Box::new(link_extractor()),
                judge: Box::new(exact_match_judge()),
                filter_judge: Box::new(offline_filter_judge()),
            });
        }
        let judge = s
            .endpoints
            .judge
            .clone()
            .or_else(|| s.endpoints.chat.clone());
        Ok(Self {
            generator: http(&s.endpoints.chat, "generator")?,
            annotator: http(&s.endpoints.chat, "annotator")?,
            extractor: http(&s.endpoints.chat, "extractor")?,
            judge: http(&judge, "judge")?,
            filter_judge: http(&judge, "filter judge")?,
        })
    }
}

pub fn expert_client(s: &Settings, tool: ToolName) -> anyhow::Result<Arc<dyn ModelClient>> {
    if s.offline {
        return Ok(Arc::new(offline_expert(tool)));
    }
    let ep = s
        .endpoints
        .experts
        .get(&tool)
        .or(s.endpoints.chat.as_ref())
        .cloned()
        .ok_or_else(|| anyhow!("no endpoint for the {tool} expert"))?;
    Ok(Arc::new(HttpChatClient::new(ep)?))
}

/// The knowledge expert behind `model_search`; none offline.
pub fn model_search_expert(s: &Settings) -> anyhow::Result<Option<Arc<dyn ModelClient>>> {
    if s.offline {
        return Ok(None);
    }
    match &s.endpoints.chat {
        Some(ep) => Ok(Some(Arc::new(HttpChatClient::new(ep.clone())?))),
        None => Ok(None),
    }
}

pub fn embedder(s: &Settings) -> anyhow::Result<Arc<dyn EmbeddingProvider>> {
    if s.offline {
        return Ok(Arc::new(HashEmbedder::new(s.embed_dim)));
    }
    let ep = s
        .endpoints
        .embed
        .clone()
        .context("no embedding endpoint: set endpoints.embed or pass --offline")?;
    Ok(Arc::new(HttpEmbedder::new(ep, s.embed_dim)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ask(c: &dyn ModelClient, turns: &[ChatTurn]) -> String {
        c.respond(turns, &[]).unwrap()
    }

    #[test]
    fn expert_calls_then_answers() {
        let e = offline_expert(ToolName::TextSearch);
        let mut turns = vec![
            ChatTurn::system("s"),
            ChatTurn::user(agent_user("Which year?")),
        ];
        let first = ask(&e, &turns);
        assert!(first.contains(r#""query_list":["Which year?"]"#), "{first}");
        let quoted_q = vec![ChatTurn::user(agent_user("Seen in \"the old mill\"?"))];
        assert!(ask(&e, &quoted_q).contains(r#""query_list":["the old mill"]"#));
        turns.push(ChatTurn::assistant(first));
        turns.push(ChatTurn::tool(
            "<tool_response>1. [1234] x\n   opened in 1931.</tool_response>",
        ));
        let reply = ask(&e, &turns);
        assert!(reply.ends_with("<answer>1931</answer>"), "{reply}");
        let mut turns = quoted_q;
        turns.push(ChatTurn::tool(
            "<tool_response>built 1801\nthe old mill burned in 1902</tool_response>",
        ));
        assert!(ask(&e, &turns).ends_with("<answer>1902</answer>"));
    }

    #[test]
    fn filter_judge_probes() {
        let j = offline_filter_judge();
        let turn = |q: &str, a: &str, p: &str| {
            vec![ChatTurn::user(format!(
                "Question: {q}\nAnswer: {a}\n?\n[probe: {p}]"
            ))]
        };
        assert_eq!(
            ask(&j, &turn("Built in 1900?", "1900", "search_necessity")),
            "No"
        );
        assert_eq!(
            ask(&j, &turn("When built?", "1900", "search_necessity")),
            "Yes"
        );
        assert_eq!(
            ask(&j, &turn("When built?", "unknown", "verifiability")),
            "No"
        );
        assert_eq!(
            ask(&j, &turn("When built?", "1900", "image_quality")),
            "Yes"
        );
    }
}
