use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::call::{validate_tool_call, ToolCall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Think,
    ToolCall,
    ToolResponse,
    Answer,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 4] = [
        SegmentKind::Think,
        SegmentKind::ToolCall,
        SegmentKind::ToolResponse,
        SegmentKind::Answer,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "think",
            SegmentKind::ToolCall => "tool_call",
            SegmentKind::ToolResponse => "tool_response",
            SegmentKind::Answer => "answer",
        }
    }

    pub fn open_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "<think>",
            SegmentKind::ToolCall => "<tool_call>",
            SegmentKind::ToolResponse => "<tool_response>",
            SegmentKind::Answer => "<answer>",
        }
    }

    pub fn close_tag(self) -> &'static str {
        match self {
            SegmentKind::Think => "</think>",
            SegmentKind::ToolCall => "</tool_call>",
            SegmentKind::ToolResponse => "</tool_response>",
            SegmentKind::Answer => "</answer>",
        }
    }
}

impl fmt::Display for SegmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One tag-delimited unit of a trajectory. `body` excludes the delimiters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed_call: Option<ToolCall>,
}

impl Segment {
    pub fn new(kind: SegmentKind, body: impl Into<String>) -> Self {
        let body = body.into();
        let parsed_call = match kind {
            SegmentKind::ToolCall => validate_tool_call(&body).ok(),
            _ => None,
        };
        Self {
            kind,
            body,
            parsed_call,
        }
    }

    pub fn think(body: impl Into<String>) -> Self {
        Self::new(SegmentKind::Think, body)
    }

    pub fn call(call: &ToolCall) -> Self {
        Self::new(SegmentKind::ToolCall, call.to_json())
    }

    pub fn response(body: impl Into<String>) -> Self {
        Self::new(SegmentKind::ToolResponse, body)
    }

    pub fn answer(body: impl Into<String>) -> Self {
        Self::new(SegmentKind::Answer, body)
    }
}

/// What the grammar expects next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Awaiting {
    Think,
    ToolCallOrAnswer,
    ToolResponse,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "cause", content = "detail")]
pub enum MalformedCause {
    EmptyOutput,
    /// A tag-shaped token outside any segment whose name is not one of the four.
    UnknownTag(String),
    UnclosedTag(SegmentKind),
    /// A known opening tag inside another segment's body.
    NestedTag(SegmentKind),
    /// A closing tag that does not close the currently open segment.
    UnmatchedClose(SegmentKind),
    /// Non-whitespace text outside any segment.
    StrayText,
    Unexpected {
        found: SegmentKind,
        expected: Awaiting,
    },
    /// Anything after the final answer.
    TrailingContent,
    ToolCallLimit(usize),
}

impl fmt::Display for MalformedCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MalformedCause::EmptyOutput => write!(f, "empty output"),
            MalformedCause::UnknownTag(t) => write!(f, "unknown tag `{t}`"),
            MalformedCause::UnclosedTag(k) => write!(f, "unclosed <{k}>"),
            MalformedCause::NestedTag(k) => write!(f, "nested <{k}>"),
            MalformedCause::UnmatchedClose(k) => write!(f, "unmatched </{k}>"),
            MalformedCause::StrayText => write!(f, "text outside tags"),
            MalformedCause::Unexpected { found, expected } => {
                write!(f, "unexpected <{found}>, expected {expected:?}")
            }
            MalformedCause::TrailingContent => write!(f, "content after final answer"),
            MalformedCause::ToolCallLimit(n) => write!(f, "more than {n} tool calls"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum Verdict {
    /// Complete: ends with think then answer.
    Valid,
    /// A grammatical prefix, e.g. mid-rollout after a tool response.
    Incomplete { awaiting: Awaiting },
    Malformed {
        position: usize,
        #[serde(flatten)]
        cause: MalformedCause,
    },
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }

    pub fn is_grammatical(&self) -> bool {
        !matches!(self, Verdict::Malformed { .. })
    }
}

pub const DEFAULT_MAX_TOOL_CALLS: usize = 5;

/// Incremental acceptor for `(think tool_call tool_response)* think answer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    state: State,
    tool_calls: usize,
    max_tool_calls: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Start,
    AfterThink,
    AfterCall,
    AfterResponse,
    Done,
}

impl GrammarState {
    pub fn new(max_tool_calls: usize) -> Self {
        Self {
            state: State::Start,
            tool_calls: 0,
            max_tool_calls,
        }
    }

    pub fn tool_calls(&self) -> usize {
        self.tool_calls
    }

    pub fn is_done(&self) -> bool {
        self.state == State::Done
    }

    pub fn awaiting(&self) -> Option<Awaiting> {
        match self.state {
            State::Start | State::AfterResponse => Some(Awaiting::Think),
            State::AfterThink => Some(Awaiting::ToolCallOrAnswer),
            State::AfterCall => Some(Awaiting::ToolResponse),
            State::Done => None,
        }
    }

    pub fn accept(&mut self, kind: SegmentKind) -> Result<(), MalformedCause> {
        use SegmentKind as K;
        let next = match (self.state, kind) {
            (State::Done, _) => return Err(MalformedCause::TrailingContent),
            (State::Start | State::AfterResponse, K::Think) => State::AfterThink,
            (State::AfterThink, K::ToolCall) => {
                if self.tool_calls == self.max_tool_calls {
                    return Err(MalformedCause::ToolCallLimit(self.max_tool_calls));
                }
                self.tool_calls += 1;
                State::AfterCall
            }
            (State::AfterThink, K::Answer) => State::Done,
            (State::AfterCall, K::ToolResponse) => State::AfterResponse,
            (_, found) => {
                return Err(MalformedCause::Unexpected {
                    found,
                    expected: self.awaiting().expect("not done"),
                })
            }
        };
        self.state = next;
        Ok(())
    }

    /// Verdict for input that ended in this state without a malformation.
    pub fn verdict(&self) -> Verdict {
        match self.state {
            State::Done => Verdict::Valid,
            State::Start => Verdict::Malformed {
                position: 0,
                cause: MalformedCause::EmptyOutput,
            },
            _ => Verdict::Incomplete {
                awaiting: self.awaiting().expect("not done"),
            },
        }
    }
}

/// Result of parsing raw model output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTrajectory {
    /// Maximal well-formed prefix.
    pub segments: Vec<Segment>,
    /// Byte range of each segment in the raw text, tags included.
    pub extents: Vec<Range<usize>>,
    pub verdict: Verdict,
}

impl ParsedTrajectory {
    pub fn tool_call_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ToolCall)
            .count()
    }

    pub fn answer(&self) -> Option<&str> {
        match self.segments.last() {
            Some(s) if s.kind == SegmentKind::Answer => Some(&s.body),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct TagToken {
    kind: SegmentKind,
    closing: bool,
    len: usize,
}

/// Recognizes one of the eight known tag strings at the start of `s`.
fn known_tag_at(s: &str) -> Option<TagToken> {
    if !s.starts_with('<') {
        return None;
    }
    SegmentKind::ALL.into_iter().find_map(|kind| {
        if s.starts_with(kind.open_tag()) {
            Some(TagToken {
                kind,
                closing: false,
                len: kind.open_tag().len(),
            })
        } else if s.starts_with(kind.close_tag()) {
            Some(TagToken {
                kind,
                closing: true,
                len: kind.close_tag().len(),
            })
        } else {
            None
        }
    })
}

/// Any `<name>` or `</name>` shaped token at the start of `s`.
fn tag_shaped_at(s: &str) -> Option<&str> {
    let rest = s.strip_prefix('<')?;
    let rest = rest.strip_prefix('/').unwrap_or(rest);
    let end = rest.find('>')?;
    let name = &rest[..end];
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    ok.then(|| &s[..s.len() - rest.len() + end + 1])
}

fn find_known_tag(raw: &str, from: usize) -> Option<(usize, TagToken)> {
    raw[from..]
        .match_indices('<')
        .find_map(|(i, _)| known_tag_at(&raw[from + i..]).map(|t| (from + i, t)))
}

/// True if `body` contains any of the eight tag strings.
pub fn contains_known_tag(body: &str) -> bool {
    find_known_tag(body, 0).is_some()
}

/// Escapes tag strings in environment text (tool output) so it can sit inside
/// a `<tool_response>` body without closing or opening segments.
pub fn neutralize_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    let mut from = 0;
    while let Some((pos, tok)) = find_known_tag(text, from) {
        out.push_str(&text[last..pos]);
        out.push_str("&lt;");
        out.push_str(&text[pos + 1..pos + tok.len]);
        last = pos + tok.len;
        from = last;
    }
    out.push_str(&text[last..]);
    out
}

pub fn parse_trajectory(raw: &str) -> ParsedTrajectory {
    parse_trajectory_with(raw, DEFAULT_MAX_TOOL_CALLS)
}

/// Strict parse. Whitespace between segments is skipped; bodies are kept
/// verbatim. Inside a body only the eight known tag strings are significant.
pub fn parse_trajectory_with(raw: &str, max_tool_calls: usize) -> ParsedTrajectory {
    let mut segments = Vec::new();
    let mut extents = Vec::new();
    let mut grammar = GrammarState::new(max_tool_calls);
    let mut pos = 0;

    let malformed = |segments, extents, position, cause| ParsedTrajectory {
        segments,
        extents,
        verdict: Verdict::Malformed { position, cause },
    };

    loop {
        let skipped = raw[pos..].len() - raw[pos..].trim_start().len();
        pos += skipped;
        if pos == raw.len() {
            break;
        }
        let rest = &raw[pos..];
        let Some(tok) = known_tag_at(rest) else {
            let cause = match tag_shaped_at(rest) {
                Some(_) if grammar.is_done() => MalformedCause::TrailingContent,
                Some(t) => MalformedCause::UnknownTag(t.to_string()),
                None if grammar.is_done() => MalformedCause::TrailingContent,
                None => MalformedCause::StrayText,
            };
            return malformed(segments, extents, pos, cause);
        };
        if tok.closing {
            return malformed(
                segments,
                extents,
                pos,
                MalformedCause::UnmatchedClose(tok.kind),
            );
        }
        if let Err(cause) = grammar.accept(tok.kind) {
            return malformed(segments, extents, pos, cause);
        }
        let body_start = pos + tok.len;
        match find_known_tag(raw, body_start) {
            None => {
                return malformed(
                    segments,
                    extents,
                    pos,
                    MalformedCause::UnclosedTag(tok.kind),
                )
            }
            Some((at, inner)) if inner.closing && inner.kind == tok.kind => {
                segments.push(Segment::new(tok.kind, &raw[body_start..at]));
                let end = at + inner.len;
                extents.push(pos..end);
                pos = end;
            }
            Some((at, inner)) if inner.closing => {
                return malformed(
                    segments,
                    extents,
                    at,
                    MalformedCause::UnmatchedClose(inner.kind),
                )
            }
            Some((at, inner)) => {
                return malformed(segments, extents, at, MalformedCause::NestedTag(inner.kind))
            }
        }
    }

    let verdict = grammar.verdict();
    ParsedTrajectory {
        segments,
        extents,
        verdict,
    }
}
