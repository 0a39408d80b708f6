//! Multi-turn trajectory grammar and tool-call schema.
//!
//! A trajectory is a sequence of tag-delimited segments
//! `(<think> <tool_call> <tool_response>)* <think> <answer>`; every tool call
//! carries a JSON body `{"name": ..., "arguments": {"query_list": [...]}}`.
//! [`parse_trajectory`] and [`render_trajectory`] are inverses on grammatical
//! trajectories.

mod call;
mod grammar;

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use call::{validate_tool_call, ToolCall, ToolCallError, ToolName};
pub use grammar::{
    contains_known_tag, neutralize_tags, parse_trajectory, parse_trajectory_with, Awaiting,
    GrammarState, MalformedCause, ParsedTrajectory, Segment, SegmentKind, Verdict,
    DEFAULT_MAX_TOOL_CALLS,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("trajectory invariant violated at segment {index}: {cause}")]
    InvariantViolation { index: usize, cause: String },
}

/// A question `{T, I}`: text plus an optional image reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultimodalQuery {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

impl MultimodalQuery {
    pub fn new(text: impl Into<String>, image: Option<String>) -> Result<Self, ProtocolError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ProtocolError::EmptyQuestion);
        }
        Ok(Self { text, image })
    }
}

/// A grammatical (possibly still open) trajectory for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: MultimodalQuery,
    pub steps: Vec<Segment>,
    pub answer: Option<String>,
    pub tool_call_count: usize,
}

impl Trajectory {
    pub fn new(question: MultimodalQuery, steps: Vec<Segment>) -> Result<Self, ProtocolError> {
        Self::with_cap(question, steps, DEFAULT_MAX_TOOL_CALLS)
    }

    /// Checks that `steps` is a grammatical prefix, that no body contains a
    /// tag string, and that the tool-call count stays within `max_tool_calls`.
    pub fn with_cap(
        question: MultimodalQuery,
        steps: Vec<Segment>,
        max_tool_calls: usize,
    ) -> Result<Self, ProtocolError> {
        let mut grammar = GrammarState::new(max_tool_calls);
        for (index, seg) in steps.iter().enumerate() {
            grammar
                .accept(seg.kind)
                .map_err(|cause| ProtocolError::InvariantViolation {
                    index,
                    cause: cause.to_string(),
                })?;
            if contains_known_tag(&seg.body) {
                return Err(ProtocolError::InvariantViolation {
                    index,
                    cause: "body contains a tag string".into(),
                });
            }
        }
        if steps.is_empty() {
            return Err(ProtocolError::InvariantViolation {
                index: 0,
                cause: MalformedCause::EmptyOutput.to_string(),
            });
        }
        let answer = grammar
            .is_done()
            .then(|| steps.last().expect("non-empty").body.clone());
        Ok(Self {
            question,
            tool_call_count: grammar.tool_calls(),
            steps,
            answer,
        })
    }

    /// Rebuilds a trajectory from parsed output; fails on malformed input.
    pub fn from_parsed(
        question: MultimodalQuery,
        parsed: ParsedTrajectory,
    ) -> Result<Self, ProtocolError> {
        if let Verdict::Malformed { position, cause } = &parsed.verdict {
            return Err(ProtocolError::InvariantViolation {
                index: parsed.segments.len(),
                cause: format!("{cause} at byte {position}"),
            });
        }
        Self::new(question, parsed.segments)
    }

    pub fn is_complete(&self) -> bool {
        self.answer.is_some()
    }

    pub fn render(&self) -> Result<String, ProtocolError> {
        render_trajectory(self)
    }
}

/// Renders `<tag>body</tag>` segments joined by a newline.
pub fn render_trajectory(t: &Trajectory) -> Result<String, ProtocolError> {
    render_with_extents(&t.steps).map(|(s, _)| s)
}

/// Renders raw segments and returns the byte range of each segment (tags included).
pub fn render_with_extents(
    steps: &[Segment],
) -> Result<(String, Vec<Range<usize>>), ProtocolError> {
    let mut grammar = GrammarState::new(usize::MAX);
    let mut out = String::new();
    let mut extents = Vec::with_capacity(steps.len());
    for (index, seg) in steps.iter().enumerate() {
        grammar
            .accept(seg.kind)
            .map_err(|cause| ProtocolError::InvariantViolation {
                index,
                cause: cause.to_string(),
            })?;
        if contains_known_tag(&seg.body) {
            return Err(ProtocolError::InvariantViolation {
                index,
                cause: "body contains a tag string".into(),
            });
        }
        if index > 0 {
            out.push('\n');
        }
        let start = out.len();
        out.push_str(seg.kind.open_tag());
        out.push_str(&seg.body);
        out.push_str(seg.kind.close_tag());
        extents.push(start..out.len());
    }
    Ok((out, extents))
}

/// One exported trajectory line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub question_text: String,
    pub image_ref: Option<String>,
    pub raw_text: String,
    pub tool_call_count: usize,
    pub answer: Option<String>,
}

impl TrajectoryRecord {
    pub fn from_trajectory(id: impl Into<String>, t: &Trajectory) -> Result<Self, ProtocolError> {
        Ok(Self {
            id: id.into(),
            question_text: t.question.text.clone(),
            image_ref: t.question.image.clone(),
            raw_text: t.render()?,
            tool_call_count: t.tool_call_count,
            answer: t.answer.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q() -> MultimodalQuery {
        MultimodalQuery::new("What is shown?", Some("img/0.png".into())).unwrap()
    }

    #[test]
    fn render_minimal() {
        let t = Trajectory::new(q(), vec![Segment::think("x"), Segment::answer("y")]).unwrap();
        assert_eq!(t.render().unwrap(), "<think>x</think>\n<answer>y</answer>");
        assert_eq!(t.answer.as_deref(), Some("y"));
    }

    #[test]
    fn call_without_response_cannot_be_completed() {
        let call = ToolCall::new(ToolName::TextSearch, vec!["q".into()]).unwrap();
        let steps = vec![
            Segment::think("t"),
            Segment::call(&call),
            Segment::think("t2"),
            Segment::answer("a"),
        ];
        assert!(matches!(
            Trajectory::new(q(), steps.clone()),
            Err(ProtocolError::InvariantViolation { index: 2, .. })
        ));
        assert!(render_with_extents(&steps).is_err());
    }

    #[test]
    fn tag_in_body_is_rejected() {
        let steps = vec![Segment::think("a </think> b"), Segment::answer("y")];
        assert!(Trajectory::new(q(), steps).is_err());
    }

    #[test]
    fn empty_question_rejected() {
        assert_eq!(
            MultimodalQuery::new("  ", None).unwrap_err(),
            ProtocolError::EmptyQuestion
        );
    }

    #[test]
    fn round_trip_with_tool_round() {
        let call = ToolCall::new(ToolName::ImageSearchByLens, vec!["tower".into()]).unwrap();
        let t = Trajectory::new(
            q(),
            vec![
                Segment::think("look it up"),
                Segment::call(&call),
                Segment::response("1. Eiffel Tower"),
                Segment::think(" done\n"),
                Segment::answer("Paris"),
            ],
        )
        .unwrap();
        let raw = t.render().unwrap();
        let back = Trajectory::from_parsed(q(), parse_trajectory(&raw)).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.tool_call_count, 1);
    }

    #[test]
    fn record_export_shape() {
        let t = Trajectory::new(q(), vec![Segment::think("x"), Segment::answer("y")]).unwrap();
        let rec = TrajectoryRecord::from_trajectory("t0", &t).unwrap();
        let json = serde_json::to_value(&rec).unwrap();
        let keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        for k in [
            "id",
            "question_text",
            "image_ref",
            "raw_text",
            "tool_call_count",
            "answer",
        ] {
            assert!(keys.contains(&k.to_string()), "{k}");
        }
    }
}
