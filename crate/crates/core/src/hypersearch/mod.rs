//! Hypergraph growth from seed images and search-intensive QA synthesis.
//!
//! Every expansion of a node yields one hyperedge: the parent plus the K
//! image and K text children found for it. QA pairs are generated from the
//! evidence in one edge (intra) or several overlapping edges (inter).

mod build;
mod provider;
mod qa;

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::modelclient::{ClientError, Modality};

pub use build::{
    build_hypergraph, expand_image_node, expand_text_node, GraphBuilder, EXTRACTOR_SYSTEM,
};
pub use provider::{FixtureWeb, ProviderError, SearchProvider, SyntheticWeb, WebPage};
pub use qa::{
    filter_qa, generate_qa, normalized_question_key, probe_turns, select_qa_context, FilterReport,
    Probe, QaContext, QaLevel, QaPair, RejectReason, Rejected,
};

#[derive(Debug, Error)]
pub enum HyperError {
    #[error("node `{0}` is already expanded")]
    AlreadyExpanded(String),
    #[error("node `{node}` at depth {depth} cannot be expanded further")]
    DepthExceeded { node: String, depth: usize },
    #[error("node `{node}` is not a {expected:?} node")]
    WrongModality { node: String, expected: Modality },
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("provider failed while expanding `{node}`: {source}")]
    ProviderFailure {
        node: String,
        #[source]
        source: ProviderError,
    },
    #[error("link extraction for `{node}` is unparseable: {raw:?}")]
    ExtractionUnparseable { node: String, raw: String },
    #[error("model call failed for `{node}`: {source}")]
    Model {
        node: String,
        #[source]
        source: ClientError,
    },
    #[error("invalid hypergraph config: {0}")]
    InvalidConfig(String),
    #[error("no eligible hyperedge")]
    NoEligibleEdge,
    #[error("needed {wanted} linked hyperedges, found at most {found}")]
    InsufficientLinkedEdges { wanted: usize, found: usize },
    #[error("generator reply is unparseable: {raw:?}")]
    GenerationUnparseable { raw: String },
    #[error("generated `{0}` is empty")]
    EmptyField(&'static str),
    #[error("{name} violated: {detail}")]
    Invariant { name: &'static str, detail: String },
    #[error("no QA pairs to filter")]
    NoPairs,
}

/// K children per modality per expansion, expansion up to depth D.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HyperConfig {
    pub k: usize,
    pub d: usize,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self { k: 3, d: 2 }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<(), HyperError> {
        if self.k == 0 {
            return Err(HyperError::InvalidConfig("K must be >= 1".into()));
        }
        Ok(())
    }

    /// Full edge size: parent plus K image and K text children.
    pub fn edge_size(&self) -> usize {
        2 * self.k + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HNode {
    pub id: String,
    pub modality: Modality,
    pub depth: usize,
    /// Position among the nodes of this modality at this depth.
    pub index: usize,
    pub parent: Option<String>,
    /// Image reference, or full page text.
    pub payload: String,
    /// Where the node came from; the key for de-duplication.
    pub url: String,
    /// Caption for images, summary for pages.
    pub annotation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyperedge {
    pub id: String,
    pub parent_node: String,
    /// Parent first, then image children, then text children.
    pub members: Vec<String>,
    /// Members that already existed and were linked instead of created.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub linked: Vec<String>,
    /// Fewer than K results came back for some modality.
    pub partial: bool,
}

impl Hyperedge {
    pub fn contains(&self, node: &str) -> bool {
        self.members.iter().any(|m| m == node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchFailure {
    pub node: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupLink {
    pub edge: String,
    pub url: String,
    pub node: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: String,
    pub failures: Vec<BranchFailure>,
    pub dedup_links: Vec<DedupLink>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypergraph {
    pub config: HyperConfig,
    pub nodes: IndexMap<String, HNode>,
    pub edges: Vec<Hyperedge>,
    pub provenance: Provenance,
}

impl Hypergraph {
    pub fn node(&self, id: &str) -> Result<&HNode, HyperError> {
        self.nodes
            .get(id)
            .ok_or_else(|| HyperError::UnknownNode(id.to_string()))
    }

    pub fn edge(&self, id: &str) -> Option<&Hyperedge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn edge_of_parent(&self, node: &str) -> Option<&Hyperedge> {
        self.edges.iter().find(|e| e.parent_node == node)
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.nodes
            .values()
            .filter(|n| n.modality == modality)
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hypergraph serializes")
    }

    /// Structural invariants, each reported by name on the first violation:
    /// `edge cardinality`, `edge membership`, `depth monotonicity`,
    /// `single expansion`, `annotation` and `acyclicity`.
    pub fn check_invariants(&self) -> Result<(), HyperError> {
        let fail = |name, detail: String| Err(HyperError::Invariant { name, detail });
        let mut parents = BTreeSet::new();
        for e in &self.edges {
            if !e.partial && e.members.len() != self.config.edge_size() {
                return fail(
                    "edge cardinality",
                    format!(
                        "{} has {} members, expected {}",
                        e.id,
                        e.members.len(),
                        self.config.edge_size()
                    ),
                );
            }
            if e.members.len() > self.config.edge_size() {
                return fail("edge cardinality", format!("{} is oversized", e.id));
            }
            if e.members.first() != Some(&e.parent_node) {
                return fail(
                    "edge membership",
                    format!("{} does not start with its parent", e.id),
                );
            }
            let distinct: BTreeSet<&String> = e.members.iter().collect();
            if distinct.len() != e.members.len() {
                return fail("edge membership", format!("{} repeats a member", e.id));
            }
            if !parents.insert(&e.parent_node) {
                return fail(
                    "single expansion",
                    format!("{} parents two edges", e.parent_node),
                );
            }
            let parent = match self.nodes.get(&e.parent_node) {
                Some(p) => p,
                None => return fail("edge membership", format!("{} has no parent node", e.id)),
            };
            for m in &e.members[1..] {
                let Some(child) = self.nodes.get(m) else {
                    return fail("edge membership", format!("{m} in {} is not a node", e.id));
                };
                if e.linked.contains(m) {
                    continue;
                }
                if child.parent.as_deref() != Some(&parent.id) {
                    return fail(
                        "edge membership",
                        format!("{m} is not a child of {}", parent.id),
                    );
                }
                if child.depth != parent.depth + 1 {
                    return fail(
                        "depth monotonicity",
                        format!("{m} at depth {} under depth {}", child.depth, parent.depth),
                    );
                }
            }
        }
        for n in self.nodes.values() {
            if n.annotation.trim().is_empty() {
                return fail("annotation", format!("{} has no annotation", n.id));
            }
            if let Some(p) = &n.parent {
                match self.nodes.get(p) {
                    Some(p) if p.depth < n.depth => {}
                    _ => return fail("acyclicity", format!("{} does not sit below {p}", n.id)),
                }
            }
            if n.depth > self.config.d {
                return fail("depth monotonicity", format!("{} is deeper than D", n.id));
            }
        }
        Ok(())
    }
}
