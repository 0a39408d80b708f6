//! Pipeline stages. Each stage is a pure step over in-memory records plus a
//! thin wrapper that reads and writes files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use deepsearch_core::drtts::{
    sft_record, Expert, ExpertPool, SftRecord, Termination, TreeSearch, TreeStats,
};
use deepsearch_core::hypersearch::{
    build_hypergraph, filter_qa, generate_qa, select_qa_context, FilterReport, FixtureWeb,
    HyperError, Hypergraph, QaLevel, QaPair, SearchProvider, SyntheticWeb,
};
use deepsearch_core::modelclient::{Endpoint, ModelClient};
use deepsearch_core::protocol::{MultimodalQuery, Trajectory};
use deepsearch_core::reward::{score_groups, GroupScore, RolloutLine};
use deepsearch_core::toolserver::{
    CorpusIndex, HttpTools, ImageDoc, ImageIndex, ImageResolver, IngestStats, SearchEngine,
    TextDoc, TextIndex, ToolExecutor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Settings;
use crate::io::{read_jsonl, write_jsonl};
use crate::offline::{embedder, expert_client, model_search_expert, Backends};

/// A broken structural invariant; the process exits 1 on it.
#[derive(Debug)]
pub struct Violation {
    pub name: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invariant violated: {}: {}", self.name, self.detail)
    }
}

impl std::error::Error for Violation {}

// ---- ingest

pub fn index_corpus(
    s: &Settings,
    docs: &[TextDoc],
    images: &[ImageDoc],
    resolver: &ImageResolver,
) -> anyhow::Result<CorpusIndex> {
    let emb = embedder(s)?;
    let (text, stats) = TextIndex::build(docs, emb.as_ref())?;
    let images = match images.is_empty() {
        true => None,
        false => Some(ImageIndex::build(images, emb.as_ref(), resolver)?),
    };
    Ok(CorpusIndex {
        dim: emb.dimension(),
        doc_count: stats.doc_count,
        text: Some(text),
        images,
    })
}

/// Saves into a sibling directory, then swaps it into place.
pub fn save_index(index: &CorpusIndex, dir: &Path, force: bool) -> anyhow::Result<()> {
    if CorpusIndex::exists(dir) && !force {
        bail!(
            "an index already exists at {}; pass --force to replace it",
            dir.display()
        );
    }
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    let staging = dir.with_file_name(name);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    index.save(&staging)?;
    if dir.exists() {
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::rename(&staging, dir).with_context(|| format!("moving index to {}", dir.display()))?;
    Ok(())
}

pub fn cmd_ingest(
    s: &Settings,
    corpus: &Path,
    images: Option<&Path>,
    image_root: Option<PathBuf>,
    index_dir: &Path,
    force: bool,
) -> anyhow::Result<IngestStats> {
    if CorpusIndex::exists(index_dir) && !force {
        bail!(
            "an index already exists at {}; pass --force to replace it",
            index_dir.display()
        );
    }
    let docs: Vec<TextDoc> = read_jsonl(corpus)?;
    let image_docs: Vec<ImageDoc> = match images {
        Some(p) => read_jsonl(p)?,
        None => Vec::new(),
    };
    let index = index_corpus(s, &docs, &image_docs, &ImageResolver::new(image_root))?;
    save_index(&index, index_dir, force)?;
    Ok(index.stats())
}

// ---- hypergraph

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub image_path: String,
    #[serde(default)]
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub seed: String,
    pub category: String,
    pub graph: Hypergraph,
}

pub fn provider(s: &Settings, web: Option<&Path>) -> anyhow::Result<Box<dyn SearchProvider>> {
    match web {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let w: FixtureWeb = serde_json::from_str(&text)
                .with_context(|| format!("parsing web fixture {}", p.display()))?;
            Ok(Box::new(w))
        }
        None if s.offline => Ok(Box::new(SyntheticWeb::default())),
        None => bail!("no web provider: pass --web <fixture.json> or --offline"),
    }
}

pub fn grow_graphs(
    s: &Settings,
    seeds: &[SeedEntry],
    web: &dyn SearchProvider,
    b: &Backends,
) -> anyhow::Result<Vec<GraphRecord>> {
    seeds
        .iter()
        .map(|seed| {
            let graph = build_hypergraph(
                &seed.image_path,
                s.hyper,
                web,
                b.extractor.as_ref(),
                b.annotator.as_ref(),
            )
            .with_context(|| format!("building from seed {}", seed.image_path))?;
            Ok(GraphRecord {
                seed: seed.image_path.clone(),
                category: seed.category.clone(),
                graph,
            })
        })
        .collect()
}

/// Runs the structural checks, turning the first failure into a [`Violation`].
pub fn check_graph(g: &Hypergraph) -> Result<(), Violation> {
    match g.check_invariants() {
        Ok(()) => Ok(()),
        Err(HyperError::Invariant { name, detail }) => Err(Violation {
            name: name.to_string(),
            detail,
        }),
        Err(e) => Err(Violation {
            name: "hypergraph".into(),
            detail: e.to_string(),
        }),
    }
}

// ---- QA

/// Intra then inter pairs for each graph, ids `q{graph}-{n}`. Graphs too
/// small for a level are skipped with a warning.
pub fn generate_pairs(
    s: &Settings,
    graphs: &[GraphRecord],
    b: &Backends,
) -> anyhow::Result<Vec<QaPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut pairs = Vec::new();
    for (gi, rec) in graphs.iter().enumerate() {
        let plan = std::iter::repeat_n(QaLevel::Intra, s.qa.intra_per_graph)
            .chain(std::iter::repeat_n(QaLevel::Inter, s.qa.inter_per_graph));
        for (n, level) in plan.enumerate() {
            let ctx = match select_qa_context(&rec.graph, level, s.qa.inter_edges, &mut rng) {
                Ok(c) => c,
                Err(
                    e @ (HyperError::NoEligibleEdge | HyperError::InsufficientLinkedEdges { .. }),
                ) => {
                    log::warn!("graph {gi}: no {level:?} context: {e}");
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let id = format!("q{gi}-{n}");
            match generate_qa(&rec.graph, &ctx, &id, b.generator.as_ref()) {
                Ok(p) => pairs.push(p),
                Err(e @ (HyperError::GenerationUnparseable { .. } | HyperError::EmptyField(_))) => {
                    log::warn!("{id}: dropped: {e}");
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(pairs)
}

pub fn filter_pairs(pairs: Vec<QaPair>, b: &Backends) -> anyhow::Result<FilterReport> {
    Ok(filter_qa(pairs, &[b.filter_judge.as_ref()])?)
}

// ---- tree search

pub fn search_engine(
    s: &Settings,
    index_dir: &Path,
    image_root: Option<PathBuf>,
) -> anyhow::Result<SearchEngine> {
    let index = CorpusIndex::load(index_dir)?;
    let mut engine = SearchEngine::new(index, embedder(s)?, s.retrieval)?
        .with_resolver(ImageResolver::new(image_root));
    if let Some(expert) = model_search_expert(s)? {
        engine = engine.with_expert(expert, Duration::from_secs(60));
    }
    Ok(engine)
}

pub fn remote_tools(url: &str) -> anyhow::Result<HttpTools> {
    Ok(HttpTools::new(Endpoint::new(url, ""))?)
}

pub fn expert_pool(s: &Settings) -> anyhow::Result<ExpertPool> {
    let experts = s
        .experts
        .iter()
        .map(|&label| {
            Ok(Expert {
                label,
                client: expert_client(s, label)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(ExpertPool::new(experts)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLine {
    pub id: String,
    pub question: String,
    pub image_ref: Option<String>,
    pub golden: String,
    #[serde(default)]
    pub candidates: Vec<String>,
    pub termination: Termination,
    pub stats: TreeStats,
    /// Node ids from root to the accepted leaf.
    #[serde(default)]
    pub path: Vec<usize>,
    #[serde(default)]
    pub trajectory: Option<Trajectory>,
}

pub fn search_all(
    s: &Settings,
    pairs: &[QaPair],
    tools: &dyn ToolExecutor,
    judge: &dyn ModelClient,
) -> anyhow::Result<Vec<TrajectoryLine>> {
    let pool = expert_pool(s)?;
    let search = TreeSearch {
        pool: &pool,
        tools,
        judge,
        summarizer: None,
        cfg: s.search,
    };
    pairs
        .iter()
        .map(|p| {
            let q = MultimodalQuery::new(p.question.clone(), Some(p.image_ref.clone()))?;
            let out = search
                .run(&q, &p.answer, &[])
                .with_context(|| format!("searching {}", p.id))?;
            let (path, trajectory) = match out.result {
                Some(v) => (v.path, Some(v.trajectory)),
                None => (Vec::new(), None),
            };
            Ok(TrajectoryLine {
                id: p.id.clone(),
                question: p.question.clone(),
                image_ref: Some(p.image_ref.clone()),
                golden: p.answer.clone(),
                candidates: Vec::new(),
                termination: out.termination,
                stats: out.stats,
                path,
                trajectory,
            })
        })
        .collect()
}

// ---- exports

pub fn sft_records(lines: &[TrajectoryLine]) -> anyhow::Result<Vec<SftRecord>> {
    lines
        .iter()
        .filter_map(|l| l.trajectory.as_ref().map(|t| (l, t)))
        .map(|(l, t)| Ok(sft_record(l.id.clone(), t)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlRecord {
    pub id: String,
    pub question: String,
    pub image_ref: String,
    pub golden: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlRejection {
    pub line: usize,
    pub id: Option<String>,
    pub reason: String,
}

fn text_field(v: &serde_json::Value, key: &str) -> Option<String> {
    v.get(key)
        .and_then(|x| x.as_str())
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(str::to_string)
}

/// One record per QA line that has an id, question, image and answer;
/// the rest are rejected with the missing field named.
pub fn rl_records(lines: &[serde_json::Value]) -> (Vec<RlRecord>, Vec<RlRejection>) {
    let mut kept = Vec::new();
    let mut rejected = Vec::new();
    for (i, v) in lines.iter().enumerate() {
        let id = text_field(v, "id");
        let fields = (
            id.clone(),
            text_field(v, "question"),
            text_field(v, "image_ref"),
            text_field(v, "answer"),
        );
        match fields {
            (Some(id), Some(question), Some(image_ref), Some(golden)) => kept.push(RlRecord {
                id,
                question,
                image_ref,
                candidates: vec![golden.clone()],
                golden,
            }),
            (_, q, img, a) => {
                let missing = [
                    ("id", id.is_none()),
                    ("question", q.is_none()),
                    ("image_ref", img.is_none()),
                    ("golden answer", a.is_none()),
                ]
                .iter()
                .filter(|(_, m)| *m)
                .map(|(n, _)| *n)
                .collect::<Vec<_>>()
                .join(", ");
                rejected.push(RlRejection {
                    line: i + 1,
                    id,
                    reason: format!("missing {missing}"),
                });
            }
        }
    }
    (kept, rejected)
}

pub fn score(
    s: &Settings,
    lines: &[RolloutLine],
    judge: &dyn ModelClient,
) -> anyhow::Result<Vec<GroupScore>> {
    Ok(score_groups(lines, judge, &s.reward)?)
}

// ---- file wrappers

pub fn cmd_build_graph(
    s: &Settings,
    seeds: &Path,
    web: Option<&Path>,
    out: &Path,
) -> anyhow::Result<Vec<GraphRecord>> {
    let seeds: Vec<SeedEntry> = read_jsonl(seeds)?;
    if seeds.is_empty() {
        bail!("seed manifest is empty");
    }
    let provider = provider(s, web)?;
    let graphs = grow_graphs(s, &seeds, provider.as_ref(), &Backends::new(s)?)?;
    for g in &graphs {
        check_graph(&g.graph)?;
    }
    write_jsonl(out, &graphs)?;
    Ok(graphs)
}

pub fn cmd_gen_qa(s: &Settings, graphs: &Path, out: &Path) -> anyhow::Result<Vec<QaPair>> {
    let graphs: Vec<GraphRecord> = read_jsonl(graphs)?;
    let pairs = generate_pairs(s, &graphs, &Backends::new(s)?)?;
    write_jsonl(out, &pairs)?;
    Ok(pairs)
}

/// Kept pairs to `out`, rejected and quarantined ones to `rejected`.
pub fn cmd_filter_qa(
    s: &Settings,
    qa: &Path,
    out: &Path,
    rejected: &Path,
) -> anyhow::Result<FilterReport> {
    let pairs: Vec<QaPair> = read_jsonl(qa)?;
    let report = filter_pairs(pairs, &Backends::new(s)?)?;
    let dropped: Vec<_> = report
        .rejected
        .iter()
        .chain(&report.quarantined)
        .cloned()
        .collect();
    write_jsonl(rejected, &dropped)?;
    write_jsonl(out, &report.kept)?;
    Ok(report)
}

pub fn cmd_tree_search(
    s: &Settings,
    qa: &Path,
    tools: &dyn ToolExecutor,
    out: &Path,
) -> anyhow::Result<Vec<TrajectoryLine>> {
    let pairs: Vec<QaPair> = read_jsonl(qa)?;
    let b = Backends::new(s)?;
    let lines = search_all(s, &pairs, tools, b.judge.as_ref())?;
    write_jsonl(out, &lines)?;
    Ok(lines)
}

pub fn cmd_export_sft(trajectories: &Path, out: &Path) -> anyhow::Result<Vec<SftRecord>> {
    let lines: Vec<TrajectoryLine> = read_jsonl(trajectories)?;
    let records = sft_records(&lines)?;
    write_jsonl(out, &records)?;
    Ok(records)
}

pub fn cmd_export_rl(qa: &Path, out: &Path) -> anyhow::Result<(Vec<RlRecord>, Vec<RlRejection>)> {
    let lines: Vec<serde_json::Value> = read_jsonl(qa)?;
    let (records, rejected) = rl_records(&lines);
    write_jsonl(out, &records)?;
    Ok((records, rejected))
}

pub fn cmd_score_rollouts(
    s: &Settings,
    rollouts: &Path,
    out: &Path,
) -> anyhow::Result<Vec<GroupScore>> {
    let lines: Vec<RolloutLine> = read_jsonl(rollouts)?;
    let scores = score(s, &lines, Backends::new(s)?.judge.as_ref())?;
    write_jsonl(out, &scores)?;
    Ok(scores)
}

pub fn serve_engine(engine: SearchEngine, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(deepsearch_core::toolserver::serve(Arc::new(engine), addr))?;
    Ok(())
}
