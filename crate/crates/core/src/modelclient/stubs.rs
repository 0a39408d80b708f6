//! Deterministic logic stubs for offline runs.
//!
//! Each stub reads the conversation it is given and derives a reply from it,
//! so outputs depend only on the request. They stand in for the generator,
//! annotator, link extractor and judge models when `--offline` is set.

use serde_json::json;

use super::{ChatTurn, ClientError, FnBackend, ModelClient, ScriptedBackend};

fn last_user(turns: &[ChatTurn]) -> Result<&ChatTurn, ClientError> {
    turns
        .iter()
        .rev()
        .find(|t| t.role == super::Role::User)
        .ok_or_else(|| ClientError::InvalidRequest("no user turn".into()))
}

/// Lowercased alphanumeric words joined by single spaces.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Annotator: an image gets a caption built from its reference, a page gets
/// its first 24 words.
pub fn echo_annotator() -> impl ModelClient {
    FnBackend(|turns: &[ChatTurn]| {
        let user = last_user(turns)?;
        match &user.image {
            Some(img) => {
                let words = normalize_answer(img);
                Ok(format!("An image ({words})"))
            }
            None => Ok(user
                .content
                .split_whitespace()
                .take(24)
                .collect::<Vec<_>>()
                .join(" ")),
        }
    })
}

/// Link extractor: collects lines of the form `link: <url>` and
/// `image: <url>` from the page in the last user turn and replies with
/// `{"urls": [...], "images": [...]}`.
pub fn link_extractor() -> impl ModelClient {
    FnBackend(|turns: &[ChatTurn]| {
        let page = &last_user(turns)?.content;
        let mut urls = Vec::new();
        let mut images = Vec::new();
        for line in page.lines() {
            let line = line.trim();
            if let Some(u) = line.strip_prefix("link:") {
                urls.push(u.trim().to_string());
            } else if let Some(u) = line.strip_prefix("image:") {
                images.push(u.trim().to_string());
            }
        }
        Ok(json!({"urls": urls, "images": images}).to_string())
    })
}

fn field<'a>(text: &'a str, label: &str, until: &str) -> Option<&'a str> {
    let start = text.find(label)? + label.len();
    let rest = &text[start..];
    let end = rest.find(until).unwrap_or(rest.len());
    Some(rest[..end].trim())
}

/// Judge that answers `Yes` when the normalized model response contains the
/// normalized ground truth or any candidate as a whole-word span.
pub fn exact_match_judge() -> impl ModelClient {
    FnBackend(|turns: &[ChatTurn]| {
        let prompt = &last_user(turns)?.content;
        let truth = field(prompt, "Ground Truth Answer:", "\n")
            .ok_or_else(|| ClientError::InvalidRequest("not a judge prompt".into()))?;
        let candidates: Vec<String> = field(prompt, "Candidate Answers:", "\n")
            .and_then(|c| serde_json::from_str(c).ok())
            .unwrap_or_default();
        let response = field(prompt, "Model Response:", "\nEvaluation Instructions").unwrap_or("");
        let response = format!(" {} ", normalize_answer(response));
        let hit = std::iter::once(truth.to_string())
            .chain(candidates)
            .map(|c| normalize_answer(&c))
            .filter(|c| !c.is_empty())
            .any(|c| response.contains(&format!(" {c} ")));
        Ok(if hit { "Yes" } else { "No" }.to_string())
    })
}

/// Filter judge that accepts every probe.
pub fn accept_all_judge() -> ScriptedBackend {
    ScriptedBackend::lenient("Yes")
}

/// QA generator: asks about the pictured subject using the first textual
/// evidence line, answering with that line's last word.
pub fn template_qa_generator() -> impl ModelClient {
    FnBackend(|turns: &[ChatTurn]| {
        let prompt = turns
            .iter()
            .map(|t| t.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let evidence = prompt
            .lines()
            .map(str::trim)
            .find_map(|l| l.strip_prefix("[1] "))
            .ok_or_else(|| ClientError::InvalidRequest("prompt carries no evidence".into()))?;
        let words: Vec<&str> = evidence.split_whitespace().collect();
        let topic = words.iter().take(6).copied().collect::<Vec<_>>().join(" ");
        let answer = words
            .last()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()))
            .unwrap_or_default();
        Ok(json!({
            "question": format!("Which detail about the subject in this image is recorded in \"{topic}\"?"),
            "answer": answer,
        })
        .to_string())
    })
}
