//! Prompt texts shipped with the toolkit and the helpers that fill them.
//!
//! The raw templates live next to this file as `.txt` and are embedded at
//! compile time; filling is plain slot substitution so that golden-file tests
//! can compare the output byte for byte.

/// Agent system message: reasoning/tool/answer guidelines plus the four tool signatures.
pub const AGENT_SYSTEM: &str = include_str!("prompts/system.txt");

const AGENT_USER: &str = include_str!("prompts/user.txt");

/// Judge system message (strict Yes/No correctness rules).
pub const JUDGE_SYSTEM: &str = include_str!("prompts/judge_system.txt");

const JUDGE_USER: &str = include_str!("prompts/judge_user.txt");

/// QA generation prompt with `{TEXT_SUMMARIES}` and `{OTHER_IMAGE_CAPTIONS}` slots.
pub const QA_GENERATION: &str = include_str!("prompts/qa_generation.txt");

/// User turn that opens every agent episode.
pub fn agent_user(question: &str) -> String {
    format!("{}{}", AGENT_USER.trim_end_matches('\n'), question)
}

/// Judge user turn. Candidate answers are rendered as a JSON array; when none
/// are supplied the ground truth is the only candidate.
pub fn judge_user(
    question: &str,
    ground_truth: &str,
    candidates: &[String],
    model_response: &str,
) -> String {
    let candidates = if candidates.is_empty() {
        vec![ground_truth.to_string()]
    } else {
        candidates.to_vec()
    };
    let candidates = serde_json::to_string(&candidates).expect("string list serializes");
    fill(
        JUDGE_USER,
        &[
            ("{question}", question),
            ("{ground_truth_answer}", ground_truth),
            ("{candidate_answers}", &candidates),
            ("{model_response}", model_response),
        ],
    )
}

/// QA generation prompt with evidence rendered one item per line as `  [n] text`.
pub fn qa_generation(text_summaries: &[String], image_captions: &[String]) -> String {
    fill(
        QA_GENERATION,
        &[
            ("{TEXT_SUMMARIES}", &evidence_block(text_summaries)),
            ("{OTHER_IMAGE_CAPTIONS}", &evidence_block(image_captions)),
        ],
    )
}

fn evidence_block(items: &[String]) -> String {
    if items.is_empty() {
        return "  (none)".to_string();
    }
    items
        .iter()
        .enumerate()
        .map(|(i, s)| format!("  [{}] {}", i + 1, collapse_ws(s)))
        .collect::<Vec<_>>()
        .join("\n")
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Single-pass slot substitution: text inserted for one slot is never
/// rescanned for another slot's marker.
fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    loop {
        let next = slots
            .iter()
            .filter_map(|(k, v)| rest.find(k).map(|p| (p, *k, *v)))
            .min_by_key(|(p, _, _)| *p);
        match next {
            Some((pos, key, value)) => {
                out.push_str(&rest[..pos]);
                out.push_str(value);
                rest = &rest[pos + key.len()..];
            }
            None => {
                out.push_str(rest);
                return out;
            }
        }
    }
}
