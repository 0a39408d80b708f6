//! Offline end-to-end run over the bundled fixtures, recording every
//! invariant it checks in `report.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::bail;
use clap::ValueEnum;
use deepsearch_core::hypersearch::{normalized_question_key, QaLevel, SyntheticWeb};
use deepsearch_core::modelclient::stubs::normalize_answer;
use deepsearch_core::modelclient::Modality;
use deepsearch_core::protocol::{parse_trajectory, render_trajectory, SegmentKind};
use deepsearch_core::reward::{format_reward, RolloutLine, TokenLogProbs};
use deepsearch_core::toolserver::{
    chunk_words, CorpusIndex, ImageDoc, ImageResolver, TextDoc, PASSAGE_WORDS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commands::{
    check_graph, filter_pairs, generate_pairs, grow_graphs, index_corpus, rl_records, save_index,
    score, search_all, search_engine, sft_records, SeedEntry, TrajectoryLine, Violation,
};
use crate::config::Settings;
use crate::io::{parse_jsonl, to_jsonl, write_atomic, write_json};
use crate::offline::Backends;

const SEEDS: &str = include_str!("../fixtures/seeds.jsonl");
const CORPUS: &str = include_str!("../fixtures/corpus.jsonl");

const GRAPH_INVARIANTS: [&str; 6] = [
    "edge cardinality",
    "edge membership",
    "depth monotonicity",
    "single expansion",
    "annotation",
    "acyclicity",
];

/// Deliberate corruption, to show that checks fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Remove one member from the first hyperedge of the first graph.
    DropEdgeMember,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Check {
    pub stage: String,
    pub name: String,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    /// Artifact file name to size in bytes.
    pub artifacts: BTreeMap<String, usize>,
}

struct Run<'a> {
    dir: &'a Path,
    report: Report,
}

impl Run<'_> {
    fn check(&mut self, stage: &str, name: &str, passed: bool, detail: impl Into<String>) {
        let detail = if passed { String::new() } else { detail.into() };
        self.report.checks.push(Check {
            stage: stage.into(),
            name: name.into(),
            passed,
            detail,
        });
    }

    fn write(&mut self, name: &str, text: String) -> anyhow::Result<()> {
        self.report.artifacts.insert(name.into(), text.len());
        write_atomic(&self.dir.join(name), text.as_bytes())
    }

    /// Ends the run at the first failed check of the stages so far.
    fn gate(&mut self) -> anyhow::Result<()> {
        let Some(failed) = self.report.checks.iter().find(|c| !c.passed).cloned() else {
            return Ok(());
        };
        self.report.passed = false;
        write_json(&self.dir.join("report.json"), &self.report)?;
        Err(Violation {
            name: failed.name,
            detail: failed.detail,
        }
        .into())
    }
}

fn closed_form(k: usize, d: usize) -> (usize, usize) {
    let nodes = (0..=d).map(|i| (2 * k).pow(i as u32)).sum();
    let edges = (0..d).map(|i| (2 * k).pow(i as u32)).sum();
    (nodes, edges)
}

/// Character offsets of whitespace-led tokens: each token is a word plus
/// the whitespace before it, so the tokens tile the text.
fn whitespace_tokens(text: &str) -> Vec<(usize, usize)> {
    let mut ends = Vec::new();
    let mut in_word = false;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() && in_word {
            ends.push(i);
        }
        in_word = !c.is_whitespace();
    }
    let len = text.chars().count();
    if in_word {
        ends.push(len);
    }
    if let Some(last) = ends.last_mut() {
        *last = len;
    }
    let mut start = 0;
    ends.into_iter()
        .map(|e| {
            let t = (start, e);
            start = e;
            t
        })
        .collect()
}

/// Four rollouts per solved question: the found trajectory, the same with a
/// wrong answer, a copy missing its first `</think>`, and a bare answer.
fn synth_rollouts(
    lines: &[TrajectoryLine],
    rng: &mut ChaCha8Rng,
) -> anyhow::Result<Vec<RolloutLine>> {
    let mut out = Vec::new();
    for l in lines {
        let Some(t) = &l.trajectory else { continue };
        let raw = render_trajectory(t)?;
        let answer = t.answer.clone().unwrap_or_default();
        let wrong = match raw.rfind(&format!("<answer>{answer}</answer>")) {
            Some(i) => format!("{}<answer>unknown</answer>", &raw[..i]),
            None => raw.clone(),
        };
        let broken = raw.replacen("</think>", "", 1);
        let bare = format!("<think>Recalling.</think>\n<answer>{}</answer>", l.golden);
        for text in [raw, wrong, broken, bare] {
            let offsets = whitespace_tokens(&text);
            let n = offsets.len();
            let theta: Vec<f64> = (0..n).map(|_| -rng.gen_range(0.05..3.0)).collect();
            let old = theta.iter().map(|x| x - rng.gen_range(-0.1..0.1)).collect();
            let reference = theta.iter().map(|x| x - rng.gen_range(-0.2..0.2)).collect();
            out.push(RolloutLine {
                question_id: l.id.clone(),
                question: l.question.clone(),
                raw_text: text,
                golden: l.golden.clone(),
                candidates: l.candidates.clone(),
                token_logprobs: TokenLogProbs {
                    theta,
                    old,
                    reference,
                },
                token_offsets: Some(offsets),
            });
        }
    }
    Ok(out)
}

pub fn run_smoke(s: &Settings, dir: &Path, fault: Option<Fault>) -> anyhow::Result<Report> {
    if !s.offline {
        bail!("pipeline-smoke runs only with --offline");
    }
    fs::create_dir_all(dir)?;
    let mut run = Run {
        dir,
        report: Report {
            seed: s.seed,
            passed: true,
            checks: Vec::new(),
            artifacts: BTreeMap::new(),
        },
    };
    let b = Backends::new(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    // hypergraph
    let seeds: Vec<SeedEntry> = parse_jsonl(SEEDS)?;
    let web = SyntheticWeb::default();
    let mut graphs = grow_graphs(s, &seeds, &web, &b)?;
    if fault == Some(Fault::DropEdgeMember) {
        if let Some(e) = graphs.first_mut().and_then(|g| g.graph.edges.first_mut()) {
            e.members.pop();
        }
    }
    let first_failure = graphs.iter().find_map(|g| check_graph(&g.graph).err());
    for name in GRAPH_INVARIANTS {
        let failed = first_failure.as_ref().filter(|v| v.name == name);
        run.check(
            "hypergraph",
            name,
            failed.is_none(),
            failed.map(|v| v.detail.clone()).unwrap_or_default(),
        );
    }
    if let Some(v) = first_failure.filter(|v| !GRAPH_INVARIANTS.contains(&v.name.as_str())) {
        run.check("hypergraph", &v.name, false, v.detail);
    }
    let (want_nodes, want_edges) = closed_form(s.hyper.k, s.hyper.d);
    let counts_ok = graphs
        .iter()
        .all(|g| g.graph.nodes.len() == want_nodes && g.graph.edges.len() == want_edges);
    run.check(
        "hypergraph",
        "closed-form counts",
        counts_ok,
        format!("expected {want_nodes} nodes and {want_edges} edges per graph"),
    );
    let again = grow_graphs(s, &seeds[..1], &web, &b)?;
    run.check(
        "hypergraph",
        "deterministic serialization",
        fault.is_some() || again[0].graph.to_json() == graphs[0].graph.to_json(),
        "rebuilding the first seed changed its JSON",
    );
    run.write("graphs.jsonl", to_jsonl(&graphs))?;
    run.gate()?;

    // ingest: bundled background documents plus every fetched page and image
    let mut docs: Vec<TextDoc> = parse_jsonl(CORPUS)?;
    let mut images = Vec::new();
    let image_root = dir.join("images");
    fs::create_dir_all(&image_root)?;
    for (gi, rec) in graphs.iter().enumerate() {
        for n in rec.graph.nodes.values() {
            match n.modality {
                Modality::Text => docs.push(TextDoc {
                    doc_id: Some(format!("g{gi}:{}", n.id)),
                    title: n.url.clone(),
                    body: n.payload.clone(),
                    url: Some(n.url.clone()),
                }),
                Modality::Image => {
                    let file = format!("g{gi}_{}.img", n.id);
                    write_atomic(&image_root.join(&file), n.annotation.as_bytes())?;
                    images.push(ImageDoc {
                        image_id: format!("g{gi}:{}", n.id),
                        uri: file,
                        caption: Some(n.annotation.clone()),
                    });
                }
            }
        }
    }
    let resolver = ImageResolver::new(Some(image_root.clone()));
    let index = index_corpus(s, &docs, &images, &resolver)?;
    let index_dir = dir.join("index");
    save_index(&index, &index_dir, true)?;
    let stats = index.stats();
    let want_passages: usize = docs
        .iter()
        .map(|d| chunk_words(&d.body, PASSAGE_WORDS).len())
        .sum();
    run.check(
        "ingest",
        "passage count",
        stats.passage_count == want_passages,
        format!(
            "{} passages, chunking gives {want_passages}",
            stats.passage_count
        ),
    );
    let reloaded = CorpusIndex::load(&index_dir)?;
    run.check(
        "ingest",
        "index reload",
        reloaded.stats() == stats && stats.image_count == images.len(),
        "reloaded index disagrees with the built one",
    );
    run.gate()?;

    // QA generation
    let pairs = generate_pairs(s, &graphs, &b)?;
    let grounded = pairs.iter().all(|p| {
        let gi: usize = p.id[1..p.id.find('-').unwrap_or(1)]
            .parse()
            .unwrap_or(usize::MAX);
        graphs.get(gi).is_some_and(|rec| {
            let g = &rec.graph;
            let members: BTreeSet<&String> = p
                .source_edges
                .iter()
                .filter_map(|e| g.edge(e))
                .flat_map(|e| &e.members)
                .collect();
            !p.evidence.is_empty()
                && !p.evidence.contains(&p.query_image)
                && p.evidence.iter().all(|x| members.contains(x))
                && members.contains(&p.query_image)
                && g.node(&p.query_image)
                    .is_ok_and(|n| n.modality == Modality::Image)
        })
    });
    run.check(
        "qa",
        "groundedness",
        grounded && !pairs.is_empty(),
        "evidence outside its source edges",
    );
    let levels = pairs.iter().all(|p| match p.level {
        QaLevel::Intra => p.source_edges.len() == 1,
        QaLevel::Inter => p.source_edges.len() >= 2,
    });
    run.check(
        "qa",
        "level separation",
        levels,
        "edge count does not match level",
    );
    run.check(
        "qa",
        "both levels present",
        pairs.iter().any(|p| p.level == QaLevel::Inter)
            && pairs.iter().any(|p| p.level == QaLevel::Intra),
        "missing a level",
    );
    run.write("qa.jsonl", to_jsonl(&pairs))?;
    run.gate()?;

    // filter
    let total = pairs.len();
    let report = filter_pairs(pairs, &b)?;
    run.check(
        "filter",
        "accounting",
        report.kept.len() + report.rejected.len() + report.quarantined.len() == total,
        "pairs lost in filtering",
    );
    let keys: BTreeSet<String> = report
        .kept
        .iter()
        .map(|p| normalized_question_key(&p.question))
        .collect();
    run.check(
        "filter",
        "kept questions unique",
        keys.len() == report.kept.len(),
        "duplicate kept",
    );
    run.write("qa_kept.jsonl", to_jsonl(&report.kept))?;
    let dropped: Vec<_> = report.rejected.iter().chain(&report.quarantined).collect();
    run.write("qa_rejected.jsonl", to_jsonl(&dropped))?;
    run.gate()?;

    // tree search
    let engine = search_engine(s, &index_dir, Some(image_root))?;
    let lines = search_all(s, &report.kept, &engine, b.judge.as_ref())?;
    let solved: Vec<&TrajectoryLine> = lines.iter().filter(|l| l.trajectory.is_some()).collect();
    run.check(
        "tree-search",
        "some question solved",
        !solved.is_empty(),
        "no trajectory verified",
    );
    run.check(
        "tree-search",
        "tool call cap",
        solved.iter().all(|l| {
            l.trajectory
                .as_ref()
                .is_some_and(|t| t.tool_call_count <= 5)
        }),
        "a trajectory exceeds 5 tool calls",
    );
    let grammar = solved.iter().all(|l| {
        let t = l.trajectory.as_ref().expect("solved");
        render_trajectory(t).is_ok_and(|raw| {
            let p = parse_trajectory(&raw);
            p.verdict.is_valid() && p.segments == t.steps && format_reward(&raw) == 1
        })
    });
    run.check(
        "tree-search",
        "trajectory grammar",
        grammar,
        "a trajectory does not reparse",
    );
    run.check(
        "tree-search",
        "answers match golden",
        solved.iter().all(|l| {
            let a = l
                .trajectory
                .as_ref()
                .and_then(|t| t.answer.as_deref())
                .unwrap_or_default();
            normalize_answer(a) == normalize_answer(&l.golden)
        }),
        "an accepted answer differs from its golden answer",
    );
    run.check(
        "tree-search",
        "node budget",
        lines
            .iter()
            .all(|l| l.stats.nodes <= s.search.node_budget + s.experts.len()),
        "a tree outgrew its budget",
    );
    run.write("trajectories.jsonl", to_jsonl(&lines))?;
    run.gate()?;

    // SFT export
    let sft = sft_records(&lines)?;
    let masked_ok = sft.iter().all(|r| {
        let parsed = parse_trajectory(&r.raw_text);
        let responses: Vec<String> = parsed
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::ToolResponse)
            .map(|s| format!("<tool_response>{}</tool_response>", s.body))
            .collect();
        let masked: Vec<String> = r.masked_spans.iter().map(|sp| r.slice(sp)).collect();
        masked == responses
    });
    run.check(
        "sft",
        "masked spans are tool responses",
        masked_ok && !sft.is_empty(),
        "mask mismatch",
    );
    let tiled = sft.iter().all(|r| {
        let mut cursor = 0;
        for sp in r.all_spans() {
            if sp.start != cursor {
                return false;
            }
            cursor = sp.end;
        }
        cursor == r.raw_text.chars().count()
    });
    run.check(
        "sft",
        "spans tile the text",
        tiled,
        "spans leave gaps or overlap",
    );
    run.write("sft.jsonl", to_jsonl(&sft))?;
    run.gate()?;

    // RL export
    let kept_values: Vec<serde_json::Value> = report
        .kept
        .iter()
        .map(|p| serde_json::to_value(p).expect("pair serializes"))
        .collect();
    let (rl, rl_rejected) = rl_records(&kept_values);
    run.check(
        "export-rl",
        "one record per kept pair",
        rl.len() == report.kept.len() && rl_rejected.is_empty(),
        "records dropped on export",
    );
    run.write("rl.jsonl", to_jsonl(&rl))?;
    run.gate()?;

    // rollout scoring
    let rollouts = synth_rollouts(&lines, &mut rng)?;
    let scores = score(s, &rollouts, b.judge.as_ref())?;
    run.check(
        "rewards",
        "advantages sum to zero",
        scores
            .iter()
            .all(|g| g.advantages.iter().sum::<f64>().abs() < 1e-9),
        "a group's advantages do not cancel",
    );
    run.check(
        "rewards",
        "format reward separates broken rollouts",
        scores.iter().all(|g| g.r_format == [1, 1, 0, 1]),
        "unexpected format rewards",
    );
    run.check(
        "rewards",
        "accuracy follows the judge",
        scores
            .iter()
            .all(|g| g.r_acc == [1, 0, 1, 1] || g.r_acc == [1, 0, 0, 1]),
        "unexpected accuracy rewards",
    );
    run.check(
        "rewards",
        "kl estimate non-negative",
        scores
            .iter()
            .flat_map(|g| &g.objective_terms)
            .all(|t| t.kl >= 0.0),
        "negative KL estimate",
    );
    run.write("rollouts.jsonl", to_jsonl(&rollouts))?;
    run.write("scores.jsonl", to_jsonl(&scores))?;
    run.gate()?;

    write_json(&dir.join("report.json"), &run.report)?;
    Ok(run.report)
}
