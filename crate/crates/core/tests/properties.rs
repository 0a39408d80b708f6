use deepsearch_core::drtts::sft_record;
use deepsearch_core::hypersearch::{build_hypergraph, HyperConfig, SyntheticWeb};
use deepsearch_core::modelclient::stubs::{echo_annotator, link_extractor};
use deepsearch_core::protocol::{
    parse_trajectory, render_trajectory, MultimodalQuery, Segment, SegmentKind, ToolCall, ToolName,
    Trajectory, Verdict,
};
use deepsearch_core::reward::{
    build_sft_mask, format_reward, response_token_mask, rollout_term, RewardConfig, ScoredRollout,
    TokenLogProbs,
};
use deepsearch_core::toolserver::{chunk_words, top_k};
use proptest::prelude::*;

fn body() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop::sample::select(vec![
            "a", "Ü", " ", "\n", "<b>", "x < y", "&amp;", "</i>", "7",
        ]),
        0..6,
    )
    .prop_map(|v| v.concat())
}

fn call() -> impl Strategy<Value = ToolCall> {
    (
        prop::sample::select(ToolName::ALL.to_vec()),
        prop::collection::vec("[a-z]{1,6}( [a-z]{1,6})?", 1..4),
    )
        .prop_map(|(name, qs)| ToolCall::new(name, qs).unwrap())
}

fn steps() -> impl Strategy<Value = Vec<Segment>> {
    (
        prop::collection::vec((body(), call(), body()), 0..=5),
        body(),
        body(),
    )
        .prop_map(|(rounds, think, answer)| {
            let mut s = Vec::new();
            for (t, c, r) in rounds {
                s.push(Segment::think(t));
                s.push(Segment::call(&c));
                s.push(Segment::response(r));
            }
            s.push(Segment::think(think));
            s.push(Segment::answer(answer));
            s
        })
}

fn query() -> MultimodalQuery {
    MultimodalQuery::new("q", Some("q.jpg".into())).unwrap()
}

/// One token per character.
fn char_offsets(text: &str) -> Vec<(usize, usize)> {
    (0..text.chars().count()).map(|i| (i, i + 1)).collect()
}

proptest! {
    #[test]
    fn render_parse_round_trip(segs in steps()) {
        let calls = segs.iter().filter(|s| s.kind == SegmentKind::ToolCall).count();
        let t = Trajectory::new(query(), segs.clone()).unwrap();
        let raw = render_trajectory(&t).unwrap();
        let parsed = parse_trajectory(&raw);
        prop_assert_eq!(&parsed.verdict, &Verdict::Valid);
        prop_assert_eq!(parsed.tool_call_count(), calls);
        prop_assert_eq!(&parsed.segments, &segs);
        prop_assert_eq!(format_reward(&raw), 1);
    }

    #[test]
    fn truncation_breaks_format(segs in steps(), cut in 1usize..20) {
        let raw = render_trajectory(&Trajectory::new(query(), segs).unwrap()).unwrap();
        let end = raw.char_indices().rev().nth(cut.min(raw.chars().count() - 1)).unwrap().0;
        prop_assume!(!raw[..end].trim_end().ends_with("</answer>"));
        prop_assert_eq!(format_reward(&raw[..end]), 0);
    }

    #[test]
    fn sft_spans_tile_and_mask_only_responses(segs in steps()) {
        let t = Trajectory::new(query(), segs).unwrap();
        let rec = sft_record("r", &t).unwrap();
        let offsets = char_offsets(&rec.raw_text);
        let mask = build_sft_mask(&rec, &offsets).unwrap();
        let from_raw = response_token_mask(&rec.raw_text, &offsets).unwrap();
        prop_assert_eq!(&mask, &from_raw);
        for (i, m) in mask.iter().enumerate() {
            let inside = rec.masked_spans.iter().any(|r| r.contains(&i));
            prop_assert_eq!(*m, !inside);
        }
    }

    #[test]
    fn top_k_equals_sorting(
        scores in prop::collection::vec(prop::sample::select(vec![0.0, 0.25, 0.5, 1.0, -1.0]), 0..60),
        k in 0usize..10,
    ) {
        let mut want: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(k);
        prop_assert_eq!(top_k(scores.iter().copied().enumerate(), k), want);
    }

    #[test]
    fn chunks_cover_words_in_order(words in prop::collection::vec("[a-z]{1,4}", 0..1200), max in 1usize..600) {
        let text = words.join(" \n");
        let chunks = chunk_words(&text, max);
        prop_assert_eq!(chunks.len(), words.len().div_ceil(max));
        for c in &chunks[..chunks.len().saturating_sub(1)] {
            prop_assert_eq!(c.split_whitespace().count(), max);
        }
        let rejoined: Vec<String> = chunks.iter().flat_map(|c| c.split_whitespace().map(String::from)).collect();
        prop_assert_eq!(rejoined, words);
    }

    #[test]
    fn hypergraph_invariants_under_short_providers(
        k in 1usize..4,
        d in 1usize..3,
        visual_cap in prop::option::of(0usize..4),
        reverse_cap in prop::option::of(0usize..4),
    ) {
        let web = SyntheticWeb { visual_cap, reverse_cap, ..SyntheticWeb::default() };
        let g = build_hypergraph("seed.jpg", HyperConfig { k, d }, &web, &link_extractor(), &echo_annotator()).unwrap();
        prop_assert!(g.check_invariants().is_ok());
        let full: usize = (0..=d).map(|i| (2 * k).pow(i as u32)).sum();
        prop_assert!(g.nodes.len() <= full);
        for e in &g.edges {
            prop_assert!(e.members.len() <= 2 * k + 1);
            prop_assert_eq!(e.partial, e.members.len() + e.linked.len() < 2 * k + 1);
        }
    }

    #[test]
    fn clipped_term_never_exceeds_unclipped(
        theta in -5.0f64..0.0,
        old in -5.0f64..0.0,
        adv in -3.0f64..3.0,
        eps in 0.01f64..0.5,
    ) {
        let cfg = RewardConfig { alpha: 0.9, clip_eps: eps, kl_beta: 0.0 };
        let lp = TokenLogProbs { theta: vec![theta], old: vec![old], reference: vec![theta] };
        let r = ScoredRollout::new("x", 1, 1, lp, &cfg);
        let ratio = (theta - old).exp();
        let term = rollout_term(&r, adv, &cfg).term;
        prop_assert!(term <= ratio * adv + 1e-12);
        prop_assert!(term >= (ratio * adv).min(ratio.clamp(1.0 - eps, 1.0 + eps) * adv) - 1e-12);
    }
}
