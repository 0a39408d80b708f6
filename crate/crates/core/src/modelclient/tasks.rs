use super::{complete, ChatTurn, ClientError, Modality, ModelClient};

/// Word budget for summarized tool responses when none is configured.
pub const DEFAULT_SUMMARY_BUDGET: usize = 300;

const SUMMARIZER_SYSTEM: &str = "You verify and condense search tool output for a research agent. \
Keep only verifiable facts that are relevant to the query, drop navigation text, ads and repetition, \
and answer in plain text.";

const CAPTION_SYSTEM: &str =
    "Write one informative caption for the image: what it shows, including any identifiable entity, place, or event.";

const SUMMARY_SYSTEM: &str =
    "Summarize the webpage content in a few sentences, keeping the key entities, dates and facts.";

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// The prefix of `text` ending with its `n`-th word, original spacing kept.
pub fn head_words(text: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    let mut seen = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                seen += 1;
                if seen == n {
                    return &text[..i];
                }
            }
            in_word = false;
        } else {
            in_word = true;
        }
    }
    text
}

/// Compresses a tool response to at most `budget` words.
///
/// Text already within budget is returned unchanged. Otherwise the auxiliary
/// model is asked for a summary; if it fails or returns nothing, the raw text
/// is head-truncated at the budget, so an output is always produced.
pub fn summarize_tool_response(
    summarizer: Option<&dyn ModelClient>,
    raw: &str,
    budget: usize,
) -> String {
    if word_count(raw) <= budget {
        return raw.to_string();
    }
    let summary = summarizer.and_then(|client| {
        let turns = [
            ChatTurn::system(format!("{SUMMARIZER_SYSTEM} Use at most {budget} words.")),
            ChatTurn::user(raw),
        ];
        match complete(client, &turns, &[]) {
            Ok(s) if !s.trim().is_empty() => Some(s),
            Ok(_) => None,
            Err(e) => {
                log::warn!("summarizer failed, truncating instead: {e}");
                None
            }
        }
    });
    match summary {
        Some(s) => head_words(s.trim(), budget).to_string(),
        None => head_words(raw, budget).to_string(),
    }
}

/// Caption for an image node, summary for a text node.
pub fn annotate(
    client: &dyn ModelClient,
    payload: &str,
    modality: Modality,
) -> Result<String, ClientError> {
    let turns = match modality {
        Modality::Image => vec![
            ChatTurn::system(CAPTION_SYSTEM),
            ChatTurn::user("Caption this image.").with_image(Some(payload.to_string())),
        ],
        Modality::Text => vec![ChatTurn::system(SUMMARY_SYSTEM), ChatTurn::user(payload)],
    };
    let reply = complete(client, &turns, &[])?;
    let reply = reply.trim();
    if reply.is_empty() {
        return Err(ClientError::EmptyAnnotation);
    }
    Ok(reply.to_string())
}

/// Annotates each payload in order; fails on the first error.
pub fn annotate_batch(
    client: &dyn ModelClient,
    payloads: &[(String, Modality)],
) -> Result<Vec<String>, ClientError> {
    payloads
        .iter()
        .map(|(p, m)| annotate(client, p, *m))
        .collect()
}
