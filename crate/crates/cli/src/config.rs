//! Layered settings: TOML file, then `DEEPSEARCH_*` environment, then flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use deepsearch_core::drtts::SearchConfig;
use deepsearch_core::hypersearch::HyperConfig;
use deepsearch_core::modelclient::Endpoint;
use deepsearch_core::protocol::ToolName;
use deepsearch_core::toolserver::{LensFusion, Mode, RetrievalConfig};
use deepsearch_core::RewardConfig64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub seeds: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct HyperFile {
    k: Option<usize>,
    d: Option<usize>,
    intra_per_graph: Option<usize>,
    inter_per_graph: Option<usize>,
    inter_edges: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RetrievalFile {
    text_top_k: Option<usize>,
    image_top_k: Option<usize>,
    image_sim_threshold: Option<f64>,
    lens_fusion: Option<LensFusion>,
    snippet_words: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SearchFile {
    max_depth: Option<usize>,
    node_budget: Option<usize>,
    context_token_cap: Option<usize>,
    summary_budget: Option<usize>,
    experts: Option<Vec<ToolName>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RewardFile {
    alpha: Option<f64>,
    clip_eps: Option<f64>,
    kl_beta: Option<f64>,
}

/// Model backends used when not offline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    /// Generator, annotator and extractor.
    pub chat: Option<Endpoint>,
    pub judge: Option<Endpoint>,
    pub embed: Option<Endpoint>,
    /// One endpoint per tool expert, keyed by tool name.
    pub experts: BTreeMap<ToolName, Endpoint>,
}

/// Contents of the TOML file; every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    seed: Option<u64>,
    mode: Option<Mode>,
    offline: Option<bool>,
    embed_dim: Option<usize>,
    paths: Paths,
    hypersearch: HyperFile,
    retrieval: RetrievalFile,
    search: SearchFile,
    reward: RewardFile,
    endpoints: Endpoints,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Values given on the command line or through the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub offline: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSettings {
    pub intra_per_graph: usize,
    pub inter_per_graph: usize,
    /// Edges per inter-edge question.
    pub inter_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub mode: Mode,
    pub offline: bool,
    pub embed_dim: usize,
    pub paths: Paths,
    pub hyper: HyperConfig,
    pub qa: QaSettings,
    pub retrieval: RetrievalConfig,
    pub search: SearchConfig,
    pub experts: Vec<ToolName>,
    pub reward: RewardConfig64,
    pub endpoints: Endpoints,
}

pub const DEFAULT_EMBED_DIM: usize = 256;

impl Settings {
    pub fn resolve(file: FileConfig, over: Overrides) -> anyhow::Result<Self> {
        let mode = over.mode.or(file.mode).unwrap_or_default();
        let r = file.retrieval;
        let mut retrieval = RetrievalConfig::for_mode(mode);
        retrieval.text_top_k = r.text_top_k.unwrap_or(retrieval.text_top_k);
        retrieval.image_top_k = r.image_top_k.unwrap_or(retrieval.image_top_k);
        retrieval.image_sim_threshold = r
            .image_sim_threshold
            .unwrap_or(retrieval.image_sim_threshold);
        retrieval.lens_fusion = r.lens_fusion.unwrap_or(retrieval.lens_fusion);
        retrieval.snippet_words = r.snippet_words.unwrap_or(retrieval.snippet_words);
        retrieval.validate()?;

        let h = file.hypersearch;
        let hyper_default = HyperConfig::default();
        let hyper = HyperConfig {
            k: h.k.unwrap_or(hyper_default.k),
            d: h.d.unwrap_or(hyper_default.d),
        };
        hyper.validate()?;
        let qa = QaSettings {
            intra_per_graph: h.intra_per_graph.unwrap_or(2),
            inter_per_graph: h.inter_per_graph.unwrap_or(1),
            inter_edges: h.inter_edges.unwrap_or(2),
        };
        if qa.inter_edges < 2 {
            bail!("hypersearch.inter_edges must be >= 2");
        }

        let s = file.search;
        let sd = SearchConfig::default();
        let search = SearchConfig {
            max_depth: s.max_depth.unwrap_or(sd.max_depth),
            node_budget: s.node_budget.unwrap_or(sd.node_budget),
            context_token_cap: s.context_token_cap.unwrap_or(sd.context_token_cap),
            summary_budget: s.summary_budget.or(sd.summary_budget),
        };
        search.validate()?;
        let experts = s.experts.unwrap_or_else(|| ToolName::ALL.to_vec());
        if experts.is_empty() {
            bail!("search.experts must name at least one tool");
        }

        let rd = RewardConfig64::default();
        let reward = RewardConfig64 {
            alpha: file.reward.alpha.unwrap_or(rd.alpha),
            clip_eps: file.reward.clip_eps.unwrap_or(rd.clip_eps),
            kl_beta: file.reward.kl_beta.unwrap_or(rd.kl_beta),
        };
        reward.validate()?;

        Ok(Self {
            seed: over.seed.or(file.seed).unwrap_or(0),
            mode,
            offline: over.offline || file.offline.unwrap_or(false),
            embed_dim: file.embed_dim.unwrap_or(DEFAULT_EMBED_DIM),
            paths: file.paths,
            hyper,
            qa,
            retrieval,
            search,
            experts,
            reward,
            endpoints: file.endpoints,
        })
    }
}

/// First of the flag value and the configured path, or an error naming both.
pub fn pick(
    flag: Option<PathBuf>,
    configured: &Option<PathBuf>,
    what: &str,
) -> anyhow::Result<PathBuf> {
    match flag.or_else(|| configured.clone()) {
        Some(p) => Ok(p),
        None => bail!("no {what} path: pass the flag or set paths.{what} in the config"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> FileConfig {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn defaults() {
        let s = Settings::resolve(FileConfig::default(), Overrides::default()).unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.mode, Mode::Train);
        assert_eq!(s.retrieval.text_top_k, 3);
        assert_eq!((s.hyper.k, s.hyper.d), (3, 2));
        assert_eq!(s.search.max_depth, 5);
        assert_eq!(s.experts.len(), 4);
        assert_eq!(s.reward.alpha, 0.9);
    }

    #[test]
    fn overrides_beat_file() {
        let f = file("seed = 3\nmode = \"eval\"\n[hypersearch]\nk = 1\n");
        let s = Settings::resolve(
            f.clone(),
            Overrides {
                seed: Some(9),
                mode: Some(Mode::Train),
                offline: true,
            },
        )
        .unwrap();
        assert_eq!((s.seed, s.mode, s.offline), (9, Mode::Train, true));
        assert_eq!(s.retrieval.text_top_k, 3);
        assert_eq!(s.hyper.k, 1);
        let s = Settings::resolve(f, Overrides::default()).unwrap();
        assert_eq!((s.seed, s.mode), (3, Mode::Eval));
        assert_eq!(s.retrieval.image_top_k, 3);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(toml::from_str::<FileConfig>("bogus = 1").is_err());
        let f = file("[reward]\nalpha = 1.5\n");
        assert!(Settings::resolve(f, Overrides::default()).is_err());
        let f = file("[search]\nexperts = []\n");
        assert!(Settings::resolve(f, Overrides::default()).is_err());
        let f = file("[search]\nexperts = [\"text_search\", \"model_search\"]\n");
        let s = Settings::resolve(f, Overrides::default()).unwrap();
        assert_eq!(s.experts, vec![ToolName::TextSearch, ToolName::ModelSearch]);
    }
}
