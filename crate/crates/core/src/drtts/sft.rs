use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{DrttsError, VerifiedTrajectory};
use crate::protocol::{render_with_extents, ProtocolError, SegmentKind, Trajectory};

/// One supervised fine-tuning example. Spans are character offsets into
/// `raw_text`; supervised and masked spans together tile it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub question: String,
    pub image_ref: Option<String>,
    pub raw_text: String,
    pub supervised_spans: Vec<Range<usize>>,
    pub masked_spans: Vec<Range<usize>>,
    pub tool_call_count: usize,
}

impl SftRecord {
    /// Sorted union of all spans.
    pub fn all_spans(&self) -> Vec<Range<usize>> {
        let mut spans: Vec<Range<usize>> = self
            .supervised_spans
            .iter()
            .chain(&self.masked_spans)
            .cloned()
            .collect();
        spans.sort_by_key(|r| r.start);
        spans
    }

    /// Text covered by `span`.
    pub fn slice(&self, span: &Range<usize>) -> String {
        self.raw_text
            .chars()
            .skip(span.start)
            .take(span.end - span.start)
            .collect()
    }
}

/// Renders `t` and splits the text into spans. Tool-response segments form
/// the masked spans exactly, tags included. The newline between segments
/// belongs to the preceding span, except after a tool response, where it
/// opens the next one.
pub fn sft_record(id: impl Into<String>, t: &Trajectory) -> Result<SftRecord, DrttsError> {
    if !t.is_complete() {
        return Err(DrttsError::Protocol(ProtocolError::InvariantViolation {
            index: t.steps.len(),
            cause: "trajectory has no final answer".into(),
        }));
    }
    let (text, extents) = render_with_extents(&t.steps)?;
    let to_char = |b: usize| text[..b].chars().count();
    let n = t.steps.len();
    let mut supervised = Vec::new();
    let mut masked = Vec::new();
    for (i, (seg, ext)) in t.steps.iter().zip(&extents).enumerate() {
        let is_response = seg.kind == SegmentKind::ToolResponse;
        let start = match i {
            0 => 0,
            _ if t.steps[i - 1].kind == SegmentKind::ToolResponse => extents[i - 1].end,
            _ => ext.start,
        };
        let end = if i + 1 == n {
            text.len()
        } else if is_response {
            ext.end
        } else {
            extents[i + 1].start
        };
        let span = to_char(start)..to_char(end);
        if is_response {
            masked.push(span);
        } else {
            supervised.push(span);
        }
    }
    Ok(SftRecord {
        id: id.into(),
        question: t.question.text.clone(),
        image_ref: t.question.image.clone(),
        raw_text: text,
        supervised_spans: supervised,
        masked_spans: masked,
        tool_call_count: t.tool_call_count,
    })
}

/// One record per verified trajectory, ids supplied by the caller.
pub fn extract_sft_dataset<'a>(
    results: impl IntoIterator<Item = (String, &'a VerifiedTrajectory)>,
) -> Result<Vec<SftRecord>, DrttsError> {
    let records = results
        .into_iter()
        .map(|(id, v)| sft_record(id, &v.trajectory))
        .collect::<Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(DrttsError::EmptyResults);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{parse_trajectory, MultimodalQuery, Segment, ToolCall, ToolName};

    fn traj(steps: Vec<Segment>) -> Trajectory {
        Trajectory::new(MultimodalQuery::new("q", None).unwrap(), steps).unwrap()
    }

    fn one_round() -> Trajectory {
        let call = ToolCall::new(ToolName::TextSearch, vec!["x".into()]).unwrap();
        traj(vec![
            Segment::think("t1 é"),
            Segment::call(&call),
            Segment::response("r1"),
            Segment::think("t2"),
            Segment::answer("a2"),
        ])
    }

    #[test]
    fn masked_spans_are_response_extents() {
        let r = sft_record("x", &one_round()).unwrap();
        assert_eq!(r.masked_spans.len(), 1);
        assert_eq!(
            r.slice(&r.masked_spans[0]),
            "<tool_response>r1</tool_response>"
        );
        assert_eq!(r.tool_call_count, 1);
    }

    #[test]
    fn spans_tile_and_reparse() {
        let r = sft_record("x", &one_round()).unwrap();
        let spans = r.all_spans();
        let mut cursor = 0;
        let mut joined = String::new();
        for s in &spans {
            assert_eq!(s.start, cursor);
            cursor = s.end;
            joined.push_str(&r.slice(s));
        }
        assert_eq!(cursor, r.raw_text.chars().count());
        assert_eq!(joined, r.raw_text);
        let parsed = parse_trajectory(&joined);
        assert!(parsed.verdict.is_valid());
        assert_eq!(parsed.segments, one_round().steps);
    }

    #[test]
    fn no_tool_rounds() {
        let r = sft_record("x", &traj(vec![Segment::think("t"), Segment::answer("a")])).unwrap();
        assert!(r.masked_spans.is_empty());
        assert_eq!(r.supervised_spans, vec![0..17, 17..r.raw_text.len()]);
    }

    #[test]
    fn incomplete_rejected() {
        let t = traj(vec![Segment::think("t")]);
        assert!(sft_record("x", &t).is_err());
        assert!(matches!(
            extract_sft_dataset(std::iter::empty()),
            Err(DrttsError::EmptyResults)
        ));
    }
}
