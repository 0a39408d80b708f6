use std::ops::Range;

use super::RewardError;
use crate::drtts::SftRecord;
use crate::protocol::{parse_trajectory, SegmentKind};

fn overlaps(a: &Range<usize>, b: &Range<usize>) -> bool {
    a.start < b.end && b.start < a.end
}

fn check_tiling(offsets: &[(usize, usize)], len: usize) -> Result<(), RewardError> {
    let mut cursor = 0;
    for (i, &(s, e)) in offsets.iter().enumerate() {
        if s != cursor {
            return Err(RewardError::OffsetsNotTiling(format!(
                "token {i} starts at {s}, expected {cursor}"
            )));
        }
        if e < s {
            return Err(RewardError::OffsetsNotTiling(format!(
                "token {i} ends before it starts"
            )));
        }
        cursor = e;
    }
    if cursor != len {
        return Err(RewardError::OffsetsNotTiling(format!(
            "tokens cover {cursor} of {len} characters"
        )));
    }
    Ok(())
}

/// Loss mask over tokens: true iff the token overlaps a supervised span and
/// no masked span. A token straddling a masked boundary is therefore masked.
/// Offsets are character positions and must tile `0..text_len`.
pub fn sft_mask(
    supervised: &[Range<usize>],
    masked: &[Range<usize>],
    text_len: usize,
    offsets: &[(usize, usize)],
) -> Result<Vec<bool>, RewardError> {
    check_tiling(offsets, text_len)?;
    Ok(offsets
        .iter()
        .map(|&(s, e)| {
            let tok = s..e;
            supervised.iter().any(|r| overlaps(&tok, r))
                && !masked.iter().any(|r| overlaps(&tok, r))
        })
        .collect())
}

/// [`sft_mask`] for an exported record; its spans must tile the raw text.
pub fn build_sft_mask(
    record: &SftRecord,
    offsets: &[(usize, usize)],
) -> Result<Vec<bool>, RewardError> {
    let len = record.raw_text.chars().count();
    let mut spans: Vec<&Range<usize>> = record
        .supervised_spans
        .iter()
        .chain(&record.masked_spans)
        .collect();
    spans.sort_by_key(|r| r.start);
    let mut cursor = 0;
    for r in spans {
        if r.start != cursor || r.end < r.start {
            return Err(RewardError::SpansNotTiling(format!(
                "span {}..{} does not continue at {cursor}",
                r.start, r.end
            )));
        }
        cursor = r.end;
    }
    if cursor != len {
        return Err(RewardError::SpansNotTiling(format!(
            "spans cover {cursor} of {len} characters"
        )));
    }
    sft_mask(&record.supervised_spans, &record.masked_spans, len, offsets)
}

/// Token mask for a raw rollout: false for tokens overlapping any
/// `<tool_response>` segment. Offsets are character positions over `raw`.
pub fn response_token_mask(
    raw: &str,
    offsets: &[(usize, usize)],
) -> Result<Vec<bool>, RewardError> {
    let byte_to_char = |b: usize| raw[..b].chars().count();
    let parsed = parse_trajectory(raw);
    let responses: Vec<Range<usize>> = parsed
        .segments
        .iter()
        .zip(&parsed.extents)
        .filter(|(s, _)| s.kind == SegmentKind::ToolResponse)
        .map(|(_, r)| byte_to_char(r.start)..byte_to_char(r.end))
        .collect();
    let len = raw.chars().count();
    sft_mask(&[0..len], &responses, len, offsets)
}
