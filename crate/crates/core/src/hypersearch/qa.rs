use std::collections::{BTreeSet, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::build::json_object;
use super::{HyperError, Hyperedge, Hypergraph};
use crate::modelclient::stubs::normalize_answer;
use crate::modelclient::{complete, ChatTurn, Modality, ModelClient};
use crate::prompts::qa_generation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QaLevel {
    /// One hyperedge.
    Intra,
    /// Several hyperedges linked by shared members.
    Inter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaContext {
    pub level: QaLevel,
    pub query_image: String,
    /// Members of the source edges other than the query image, first
    /// appearance order.
    pub evidence: Vec<String>,
    pub source_edges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub id: String,
    pub question: String,
    pub answer: String,
    /// Node id of the query image.
    pub query_image: String,
    /// The image itself, as stored on that node.
    pub image_ref: String,
    #[serde(rename = "evidence_ids")]
    pub evidence: Vec<String>,
    pub level: QaLevel,
    pub source_edges: Vec<String>,
}

fn eligible(g: &Hypergraph) -> Vec<&Hyperedge> {
    g.edges
        .iter()
        .filter(|e| !e.partial)
        .filter(|e| {
            e.members.iter().any(|m| {
                g.nodes
                    .get(m)
                    .is_some_and(|n| n.modality == Modality::Image)
            })
        })
        .collect()
}

fn images_in<'a>(g: &Hypergraph, members: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    members
        .into_iter()
        .filter(|m| {
            g.nodes
                .get(*m)
                .is_some_and(|n| n.modality == Modality::Image)
        })
        .cloned()
        .collect()
}

fn shared_images(g: &Hypergraph, edges: &[&Hyperedge]) -> Vec<String> {
    images_in(
        g,
        edges[0]
            .members
            .iter()
            .filter(|x| edges.iter().all(|e| e.contains(x))),
    )
}

/// Edges reachable from `start` through shared members, breadth first, at
/// most `m`.
fn linked_from<'a>(edges: &[&'a Hyperedge], start: usize, m: usize) -> Vec<&'a Hyperedge> {
    let shares = |a: &Hyperedge, b: &Hyperedge| a.members.iter().any(|x| b.contains(x));
    let mut taken = vec![start];
    let mut queue = VecDeque::from([start]);
    while let Some(i) = queue.pop_front() {
        for j in 0..edges.len() {
            if taken.len() == m {
                return taken.into_iter().map(|i| edges[i]).collect();
            }
            if !taken.contains(&j) && shares(edges[i], edges[j]) {
                taken.push(j);
                queue.push_back(j);
            }
        }
    }
    taken.into_iter().map(|i| edges[i]).collect()
}

/// Picks the edges and query image for one QA pair. Partial edges are
/// never used. Intra takes the edge parent as query image when it is an
/// image; Inter prefers an image shared by all chosen edges.
pub fn select_qa_context<R: Rng>(
    g: &Hypergraph,
    level: QaLevel,
    m: usize,
    rng: &mut R,
) -> Result<QaContext, HyperError> {
    let edges = eligible(g);
    if edges.is_empty() {
        return Err(HyperError::NoEligibleEdge);
    }
    let chosen: Vec<&Hyperedge> = match level {
        QaLevel::Intra => vec![edges[rng.gen_range(0..edges.len())]],
        QaLevel::Inter => {
            if m < 2 {
                return Err(HyperError::InvalidConfig("inter QA needs m >= 2".into()));
            }
            let groups: Vec<Vec<&Hyperedge>> = (0..edges.len())
                .map(|i| linked_from(&edges, i, m))
                .collect();
            let full: Vec<&Vec<&Hyperedge>> = groups.iter().filter(|c| c.len() == m).collect();
            let anchored: Vec<&Vec<&Hyperedge>> = full
                .iter()
                .copied()
                .filter(|c| !shared_images(g, c).is_empty())
                .collect();
            let pick = if anchored.is_empty() {
                full.choose(rng)
            } else {
                anchored.choose(rng)
            };
            match pick {
                Some(c) => c.to_vec(),
                None => {
                    return Err(HyperError::InsufficientLinkedEdges {
                        wanted: m,
                        found: groups.iter().map(Vec::len).max().unwrap_or(0),
                    })
                }
            }
        }
    };
    let query_image = match level {
        QaLevel::Intra => {
            let e = chosen[0];
            if g.node(&e.parent_node)?.modality == Modality::Image {
                e.parent_node.clone()
            } else {
                images_in(g, &e.members)
                    .choose(rng)
                    .cloned()
                    .ok_or(HyperError::NoEligibleEdge)?
            }
        }
        QaLevel::Inter => {
            let shared = shared_images(g, &chosen);
            let pool = if shared.is_empty() {
                images_in(g, chosen.iter().flat_map(|e| &e.members))
            } else {
                shared
            };
            pool.choose(rng)
                .cloned()
                .ok_or(HyperError::NoEligibleEdge)?
        }
    };
    let mut seen = BTreeSet::from([query_image.clone()]);
    let evidence: Vec<String> = chosen
        .iter()
        .flat_map(|e| &e.members)
        .filter(|x| seen.insert((*x).clone()))
        .cloned()
        .collect();
    if evidence.is_empty() {
        return Err(HyperError::NoEligibleEdge);
    }
    Ok(QaContext {
        level,
        query_image,
        evidence,
        source_edges: chosen.iter().map(|e| e.id.clone()).collect(),
    })
}

/// Fills the generation prompt with the evidence annotations and asks the
/// generator about the query image.
pub fn generate_qa(
    g: &Hypergraph,
    ctx: &QaContext,
    id: impl Into<String>,
    generator: &dyn ModelClient,
) -> Result<QaPair, HyperError> {
    let mut summaries = Vec::new();
    let mut captions = Vec::new();
    for e in &ctx.evidence {
        let n = g.node(e)?;
        match n.modality {
            Modality::Text => summaries.push(n.annotation.clone()),
            Modality::Image => captions.push(n.annotation.clone()),
        }
    }
    let query = g.node(&ctx.query_image)?;
    let turns = [
        ChatTurn::system(qa_generation(&summaries, &captions)),
        ChatTurn::user("Generate the question-answer pair for this query image.")
            .with_image(Some(query.payload.clone())),
    ];
    let raw = complete(generator, &turns, &[]).map_err(|source| HyperError::Model {
        node: ctx.query_image.clone(),
        source,
    })?;
    let unparseable = || HyperError::GenerationUnparseable { raw: raw.clone() };
    let obj = json_object(&raw).ok_or_else(unparseable)?;
    let text = |key| {
        obj.get(key)
            .and_then(|v| v.as_str())
            .map(str::trim)
            .ok_or_else(unparseable)
    };
    let question = text("question")?.to_string();
    let answer = text("answer")?.to_string();
    if question.is_empty() {
        return Err(HyperError::EmptyField("question"));
    }
    if answer.is_empty() {
        return Err(HyperError::EmptyField("answer"));
    }
    Ok(QaPair {
        id: id.into(),
        question,
        answer,
        query_image: ctx.query_image.clone(),
        image_ref: query.payload.clone(),
        evidence: ctx.evidence.clone(),
        level: ctx.level,
        source_edges: ctx.source_edges.clone(),
    })
}

/// Questions a filter judge is asked about each pair, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    VisualRelevance,
    SearchNecessity,
    Verifiability,
    ImageQuality,
}

impl Probe {
    pub const ALL: [Probe; 4] = [
        Probe::VisualRelevance,
        Probe::SearchNecessity,
        Probe::Verifiability,
        Probe::ImageQuality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Probe::VisualRelevance => "visual_relevance",
            Probe::SearchNecessity => "search_necessity",
            Probe::Verifiability => "verifiability",
            Probe::ImageQuality => "image_quality",
        }
    }

    fn ask(self) -> &'static str {
        match self {
            Probe::VisualRelevance => "Is the question directly about what the image shows?",
            Probe::SearchNecessity => {
                "Does answering require information that cannot be read off the image itself?"
            }
            Probe::Verifiability => "Is the answer factual, concise and checkable against the web?",
            Probe::ImageQuality => "Is the image clear enough to identify its subject?",
        }
    }

    fn rejection(self) -> RejectReason {
        match self {
            Probe::VisualRelevance => RejectReason::VisuallyIrrelevant,
            Probe::SearchNecessity => RejectReason::SearchFree,
            Probe::Verifiability => RejectReason::Unverifiable,
            Probe::ImageQuality => RejectReason::LowQualityImage,
        }
    }
}

const FILTER_SYSTEM: &str = "You review question-answer pairs written about an image. \
Reply with Yes or No only.";

/// Conversation for one probe. The last user line carries a
/// `[probe: name]` marker so scripted judges can key on it.
pub fn probe_turns(pair: &QaPair, probe: Probe) -> Vec<ChatTurn> {
    vec![
        ChatTurn::system(FILTER_SYSTEM),
        ChatTurn::user(format!(
            "Question: {}\nAnswer: {}\n{}\n[probe: {}]",
            pair.question,
            pair.answer,
            probe.ask(),
            probe.as_str()
        ))
        .with_image(Some(pair.image_ref.clone())),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Duplicate,
    SentenceAnswer,
    VisuallyIrrelevant,
    SearchFree,
    Unverifiable,
    LowQualityImage,
    /// Quarantine only: a judge reply was neither yes nor no.
    JudgeUnparseable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejected {
    pub pair: QaPair,
    pub reason: RejectReason,
    /// Judge index and raw reply, when a judge decided.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: Vec<QaPair>,
    pub rejected: Vec<Rejected>,
    pub quarantined: Vec<Rejected>,
}

/// Duplicate key: lowercased alphanumeric words.
pub fn normalized_question_key(q: &str) -> String {
    normalize_answer(q)
}

fn is_sentence(answer: &str) -> bool {
    let a = answer.trim();
    a.split_whitespace().count() >= 6 && a.ends_with(['.', '!', '?'])
}

fn verdict(raw: &str) -> Option<bool> {
    let first = raw
        .trim()
        .split(|c: char| !c.is_alphanumeric())
        .next()?
        .to_lowercase();
    match first.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Drops duplicates and sentence answers, then asks every judge every probe
/// in order. The first `No` rejects; an unparseable reply quarantines the
/// pair. Transport failures abort the whole pass.
pub fn filter_qa(
    pairs: Vec<QaPair>,
    judges: &[&dyn ModelClient],
) -> Result<FilterReport, HyperError> {
    if pairs.is_empty() {
        return Err(HyperError::NoPairs);
    }
    let mut report = FilterReport::default();
    let mut seen = BTreeSet::new();
    'pairs: for pair in pairs {
        if !seen.insert(normalized_question_key(&pair.question)) {
            report.rejected.push(Rejected {
                pair,
                reason: RejectReason::Duplicate,
                detail: None,
            });
            continue;
        }
        if is_sentence(&pair.answer) {
            report.rejected.push(Rejected {
                pair,
                reason: RejectReason::SentenceAnswer,
                detail: None,
            });
            continue;
        }
        for (j, judge) in judges.iter().enumerate() {
            for probe in Probe::ALL {
                let raw = complete(*judge, &probe_turns(&pair, probe), &[]).map_err(|source| {
                    HyperError::Model {
                        node: pair.query_image.clone(),
                        source,
                    }
                })?;
                let detail = Some(format!("judge {j}: {}", raw.trim()));
                match verdict(&raw) {
                    Some(true) => {}
                    Some(false) => {
                        report.rejected.push(Rejected {
                            pair,
                            reason: probe.rejection(),
                            detail,
                        });
                        continue 'pairs;
                    }
                    None => {
                        report.quarantined.push(Rejected {
                            pair,
                            reason: RejectReason::JudgeUnparseable,
                            detail,
                        });
                        continue 'pairs;
                    }
                }
            }
        }
        report.kept.push(pair);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypersearch::{build_hypergraph, HyperConfig, SyntheticWeb};
    use crate::modelclient::stubs::{
        accept_all_judge, echo_annotator, link_extractor, template_qa_generator,
    };
    use crate::modelclient::ScriptedBackend;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(k: usize, d: usize) -> Hypergraph {
        build_hypergraph(
            "seeds/a.jpg",
            HyperConfig { k, d },
            &SyntheticWeb::default(),
            &link_extractor(),
            &echo_annotator(),
        )
        .unwrap()
    }

    fn pair(id: &str, q: &str, a: &str) -> QaPair {
        QaPair {
            id: id.into(),
            question: q.into(),
            answer: a.into(),
            query_image: "i0.0".into(),
            image_ref: "s.jpg".into(),
            evidence: vec!["t1.0".into()],
            level: QaLevel::Intra,
            source_edges: vec!["e0".into()],
        }
    }

    #[test]
    fn intra_single_edge() {
        let g = graph(1, 1);
        let ctx =
            select_qa_context(&g, QaLevel::Intra, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ctx.query_image, "i0.0");
        assert_eq!(ctx.evidence, vec!["i1.0", "t1.0"]);
        assert_eq!(ctx.source_edges, vec!["e0"]);
    }

    #[test]
    fn inter_spans_linked_edges() {
        let g = graph(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = select_qa_context(&g, QaLevel::Inter, 2, &mut rng).unwrap();
        assert_eq!(ctx.source_edges.len(), 2);
        let edges: Vec<&Hyperedge> = ctx
            .source_edges
            .iter()
            .map(|e| g.edge(e).unwrap())
            .collect();
        assert!(edges.iter().all(|e| e.contains(&ctx.query_image)));
        let mut want: Vec<String> = edges
            .iter()
            .flat_map(|e| e.members.clone())
            .filter(|m| *m != ctx.query_image)
            .collect();
        want.sort();
        want.dedup();
        let mut got = ctx.evidence.clone();
        got.sort();
        assert_eq!(got, want);
        let again =
            select_qa_context(&g, QaLevel::Inter, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again, ctx);
    }

    #[test]
    fn selection_errors() {
        let g = graph(1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_qa_context(&g, QaLevel::Intra, 1, &mut rng),
            Err(HyperError::NoEligibleEdge)
        ));
        let g = graph(1, 1);
        assert!(matches!(
            select_qa_context(&g, QaLevel::Inter, 2, &mut rng),
            Err(HyperError::InsufficientLinkedEdges {
                wanted: 2,
                found: 1
            })
        ));
    }

    #[test]
    fn generation_pass_through_and_errors() {
        let g = graph(1, 1);
        let ctx =
            select_qa_context(&g, QaLevel::Intra, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let gen = ScriptedBackend::lenient(r#"{"question":"q?","answer":"1959"}"#);
        let p = generate_qa(&g, &ctx, "qa0", &gen).unwrap();
        assert_eq!((p.question.as_str(), p.answer.as_str()), ("q?", "1959"));
        assert_eq!(p.image_ref, "seeds/a.jpg");
        let prose = ScriptedBackend::lenient("The answer is 1959.");
        assert!(matches!(
            generate_qa(&g, &ctx, "qa0", &prose),
            Err(HyperError::GenerationUnparseable { .. })
        ));
        let empty = ScriptedBackend::lenient(r#"{"question":"q?","answer":" "}"#);
        assert!(matches!(
            generate_qa(&g, &ctx, "qa0", &empty),
            Err(HyperError::EmptyField("answer"))
        ));
    }

    #[test]
    fn template_generator_answers_with_year() {
        let g = graph(1, 1);
        let ctx =
            select_qa_context(&g, QaLevel::Intra, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = generate_qa(&g, &ctx, "qa0", &template_qa_generator()).unwrap();
        let year: u32 = p.answer.parse().unwrap();
        assert!((1850..2020).contains(&year));
    }

    #[test]
    fn duplicates_and_search_free() {
        let judge = ScriptedBackend::lenient("Yes").on_contains("[probe: search_necessity]", "No");
        let r = filter_qa(vec![pair("a", "What year?", "1900")], &[&judge]).unwrap();
        assert_eq!(r.rejected[0].reason, RejectReason::SearchFree);
        let ok = accept_all_judge();
        let r = filter_qa(
            vec![
                pair("a", "What year?", "1900"),
                pair("b", "what  YEAR", "1901"),
            ],
            &[&ok],
        )
        .unwrap();
        assert_eq!(r.kept.len(), 1);
        assert_eq!(r.rejected[0].reason, RejectReason::Duplicate);
        assert_eq!(r.rejected[0].pair.id, "b");
    }

    #[test]
    fn unparseable_quarantines_and_sentences_rejected() {
        let judge = ScriptedBackend::lenient("maybe");
        let r = filter_qa(vec![pair("a", "q1", "x")], &[&judge]).unwrap();
        assert_eq!(r.quarantined.len(), 1);
        let ok = accept_all_judge();
        let r = filter_qa(
            vec![pair(
                "a",
                "q1",
                "The bridge was opened to the public in 1900.",
            )],
            &[&ok],
        )
        .unwrap();
        assert_eq!(r.rejected[0].reason, RejectReason::SentenceAnswer);
        assert!(matches!(
            filter_qa(vec![], &[&ok]),
            Err(HyperError::NoPairs)
        ));
    }
}
