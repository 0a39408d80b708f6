//! `deepsearch`: corpus ingestion, hypergraph QA synthesis, tool serving,
//! tree search, dataset export and rollout scoring.
//!
//! Exit codes: 0 success, 1 a structural invariant failed, 2 bad input,
//! configuration or backend failure.

mod commands;
mod config;
mod io;
mod offline;
mod smoke;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use deepsearch_core::toolserver::{Mode, ToolExecutor};

use commands::Violation;
use config::{pick, FileConfig, Overrides, Settings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Train,
    Eval,
}

#[derive(Debug, Parser)]
#[command(
    name = "deepsearch",
    version,
    about = "Multimodal deep-search data pipeline"
)]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true, env = "DEEPSEARCH_CONFIG")]
    config: Option<PathBuf>,
    /// Use deterministic stubs instead of model endpoints.
    #[arg(long, global = true, env = "DEEPSEARCH_OFFLINE")]
    offline: bool,
    #[arg(long, global = true, env = "DEEPSEARCH_SEED")]
    seed: Option<u64>,
    /// Retrieval defaults: train keeps top-3 passages and 1 image, eval top-5 and 3.
    #[arg(long, global = true, env = "DEEPSEARCH_MODE", value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Chunk, embed and store a text corpus and optional image manifest.
    Ingest {
        /// JSONL of {doc_id?, title, body, url?}.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// JSONL of {image_id, uri, caption?}.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Replace an existing index.
        #[arg(long)]
        force: bool,
    },
    /// Grow one hypergraph per seed image.
    BuildGraph {
        /// JSONL of {image_path, category}.
        #[arg(long)]
        seeds: Option<PathBuf>,
        /// Fixture web (JSON) instead of the synthetic one.
        #[arg(long)]
        web: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate intra- and inter-edge QA pairs from built graphs.
    GenQa {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge-filter QA pairs: solvable without search, unsupported or malformed pairs are dropped.
    FilterQa {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rejected and quarantined pairs; defaults next to `out`.
        #[arg(long)]
        rejected: Option<PathBuf>,
    },
    /// Serve the four tools over HTTP.
    ServeTools {
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8700")]
        addr: SocketAddr,
    },
    /// Expert tree search over filtered QA pairs.
    TreeSearch {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Use a running tool server instead of a local index.
        #[arg(long)]
        tools_url: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised records with tool responses masked.
    ExportSft {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// {id, question, image_ref, golden, candidates} records.
    ExportRl {
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewards, advantages and objective per rollout group.
    ScoreRollouts {
        #[arg(long)]
        rollouts: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole pipeline on bundled fixtures; needs --offline.
    PipelineSmoke {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        fault: Option<smoke::Fault>,
    },
}

fn settings(cli: &Cli) -> anyhow::Result<Settings> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    Settings::resolve(
        file,
        Overrides {
            seed: cli.seed,
            mode: cli.mode.map(|m| match m {
                ModeArg::Train => Mode::Train,
                ModeArg::Eval => Mode::Eval,
            }),
            offline: cli.offline,
        },
    )
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string(v).expect("summary serializes"));
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let s = settings(&cli)?;
    let p = &s.paths;
    match cli.command {
        Command::Ingest {
            corpus,
            images,
            image_root,
            index,
            force,
        } => {
            let corpus = pick(corpus, &p.corpus, "corpus")?;
            let index = pick(index, &p.index, "index")?;
            let images = images.or_else(|| p.images.clone());
            let stats = commands::cmd_ingest(
                &s,
                &corpus,
                images.as_deref(),
                image_root.or_else(|| p.image_root.clone()),
                &index,
                force,
            )?;
            print_json(&stats);
        }
        Command::BuildGraph { seeds, web, out } => {
            let seeds = pick(seeds, &p.seeds, "seeds")?;
            let graphs = commands::cmd_build_graph(&s, &seeds, web.as_deref(), &out)?;
            let nodes: usize = graphs.iter().map(|g| g.graph.nodes.len()).sum();
            let edges: usize = graphs.iter().map(|g| g.graph.edges.len()).sum();
            print_json(
                &serde_json::json!({"graphs": graphs.len(), "nodes": nodes, "edges": edges}),
            );
        }
        Command::GenQa { graphs, out } => {
            let pairs = commands::cmd_gen_qa(&s, &graphs, &out)?;
            print_json(&serde_json::json!({"pairs": pairs.len()}));
        }
        Command::FilterQa { qa, out, rejected } => {
            let rejected = rejected.unwrap_or_else(|| out.with_extension("rejected.jsonl"));
            let r = commands::cmd_filter_qa(&s, &qa, &out, &rejected)?;
            print_json(&serde_json::json!({
                "kept": r.kept.len(),
                "rejected": r.rejected.len(),
                "quarantined": r.quarantined.len(),
            }));
        }
        Command::ServeTools {
            index,
            image_root,
            addr,
        } => {
            let index = pick(index, &p.index, "index")?;
            let engine =
                commands::search_engine(&s, &index, image_root.or_else(|| p.image_root.clone()))?;
            commands::serve_engine(engine, addr)?;
        }
        Command::TreeSearch {
            qa,
            index,
            image_root,
            tools_url,
            out,
        } => {
            let tools: Box<dyn ToolExecutor> = match tools_url {
                Some(url) => Box::new(commands::remote_tools(&url)?),
                None => {
                    let index = pick(index, &p.index, "index")?;
                    Box::new(commands::search_engine(
                        &s,
                        &index,
                        image_root.or_else(|| p.image_root.clone()),
                    )?)
                }
            };
            let lines = commands::cmd_tree_search(&s, &qa, tools.as_ref(), &out)?;
            let solved = lines.iter().filter(|l| l.trajectory.is_some()).count();
            print_json(&serde_json::json!({"questions": lines.len(), "solved": solved}));
        }
        Command::ExportSft { trajectories, out } => {
            let records = commands::cmd_export_sft(&trajectories, &out)?;
            print_json(&serde_json::json!({"records": records.len()}));
        }
        Command::ExportRl { qa, out } => {
            let (records, rejected) = commands::cmd_export_rl(&qa, &out)?;
            for r in &rejected {
                eprintln!("line {}: rejected: {}", r.line, r.reason);
            }
            print_json(&serde_json::json!({"records": records.len(), "rejected": rejected}));
        }
        Command::ScoreRollouts { rollouts, out } => {
            let scores = commands::cmd_score_rollouts(&s, &rollouts, &out)?;
            print_json(&serde_json::json!({"groups": scores.len()}));
        }
        Command::PipelineSmoke { out, fault } => {
            let out = pick(out, &p.out, "out")?;
            let report = smoke::run_smoke(&s, &out, fault)?;
            println!(
                "pipeline-smoke: {} checks passed, report at {}",
                report.checks.len(),
                out.join("report.json").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Violation>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
