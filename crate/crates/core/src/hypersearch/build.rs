use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use indexmap::IndexMap;
use serde_json::Value;

use super::provider::SearchProvider;
use super::{
    BranchFailure, DedupLink, HNode, HyperConfig, HyperError, Hyperedge, Hypergraph, Provenance,
};
use crate::modelclient::{annotate, complete, ChatTurn, Modality, ModelClient};

/// System prompt for link extraction; `{K}` is replaced by the fanout.
pub const EXTRACTOR_SYSTEM: &str = "From the webpage below, extract the top-{K} most informative \
webpage URLs and the top-{K} most relevant image links. Reply with JSON only: \
{\"urls\": [...], \"images\": [...]}";

/// Extracts the outermost `{...}` of a reply and parses it.
pub(crate) fn json_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str(&raw[start..=end]).ok()? {
        Value::Object(m) => Some(m),
        _ => None,
    }
}

fn string_list(obj: &serde_json::Map<String, Value>, key: &str) -> Option<Vec<String>> {
    obj.get(key)?
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect()
}

fn first_distinct(items: Vec<String>, k: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items
        .into_iter()
        .filter(|s| seen.insert(s.clone()))
        .take(k)
        .collect()
}

/// Mutable hypergraph under construction.
pub struct GraphBuilder<'a> {
    graph: Hypergraph,
    provider: &'a dyn SearchProvider,
    extractor: &'a dyn ModelClient,
    annotator: &'a dyn ModelClient,
    by_url: HashMap<String, String>,
    counters: BTreeMap<(usize, Modality), usize>,
}

enum Child {
    New {
        modality: Modality,
        url: String,
        payload: String,
    },
    Failed {
        url: String,
        error: String,
    },
}

impl<'a> GraphBuilder<'a> {
    /// Starts a graph holding only the annotated seed image.
    pub fn new(
        seed: &str,
        config: HyperConfig,
        provider: &'a dyn SearchProvider,
        extractor: &'a dyn ModelClient,
        annotator: &'a dyn ModelClient,
    ) -> Result<Self, HyperError> {
        config.validate()?;
        let mut b = Self {
            graph: Hypergraph {
                config,
                nodes: IndexMap::new(),
                edges: Vec::new(),
                provenance: Provenance {
                    seed: seed.to_string(),
                    ..Provenance::default()
                },
            },
            provider,
            extractor,
            annotator,
            by_url: HashMap::new(),
            counters: BTreeMap::new(),
        };
        b.add_node(Modality::Image, 0, None, seed.to_string(), seed.to_string())?;
        Ok(b)
    }

    pub fn graph(&self) -> &Hypergraph {
        &self.graph
    }

    pub fn finish(self) -> Hypergraph {
        self.graph
    }

    fn add_node(
        &mut self,
        modality: Modality,
        depth: usize,
        parent: Option<String>,
        payload: String,
        url: String,
    ) -> Result<String, HyperError> {
        let counter = self.counters.entry((depth, modality)).or_insert(0);
        let index = *counter;
        *counter += 1;
        let prefix = match modality {
            Modality::Image => 'i',
            Modality::Text => 't',
        };
        let id = format!("{prefix}{depth}.{index}");
        let annotation =
            annotate(self.annotator, &payload, modality).map_err(|source| HyperError::Model {
                node: id.clone(),
                source,
            })?;
        self.by_url.insert(url.clone(), id.clone());
        self.graph.nodes.insert(
            id.clone(),
            HNode {
                id: id.clone(),
                modality,
                depth,
                index,
                parent,
                payload,
                url,
                annotation,
            },
        );
        Ok(id)
    }

    fn check_expandable(&self, id: &str, expected: Modality) -> Result<&HNode, HyperError> {
        let node = self.graph.node(id)?;
        if node.modality != expected {
            return Err(HyperError::WrongModality {
                node: id.to_string(),
                expected,
            });
        }
        if self.graph.edge_of_parent(id).is_some() {
            return Err(HyperError::AlreadyExpanded(id.to_string()));
        }
        if node.depth >= self.graph.config.d {
            return Err(HyperError::DepthExceeded {
                node: id.to_string(),
                depth: node.depth,
            });
        }
        Ok(node)
    }

    /// Adds the children and the edge. Already-known URLs are linked;
    /// failed children are recorded and leave the edge partial.
    fn attach(&mut self, parent: &str, children: Vec<Child>) -> Result<String, HyperError> {
        let k = self.graph.config.k;
        let depth = self.graph.node(parent)?.depth + 1;
        let edge_id = format!("e{}", self.graph.edges.len());
        let mut members = vec![parent.to_string()];
        let mut linked = Vec::new();
        let mut per_modality: BTreeMap<Modality, usize> = BTreeMap::new();
        for child in children {
            match child {
                Child::Failed { url, error } => {
                    self.graph.provenance.failures.push(BranchFailure {
                        node: parent.to_string(),
                        error: format!("{url}: {error}"),
                    })
                }
                Child::New {
                    modality,
                    url,
                    payload,
                } => {
                    if let Some(existing) = self.by_url.get(&url).cloned() {
                        if members.contains(&existing) {
                            continue;
                        }
                        self.graph.provenance.dedup_links.push(DedupLink {
                            edge: edge_id.clone(),
                            url,
                            node: existing.clone(),
                        });
                        *per_modality
                            .entry(self.graph.node(&existing)?.modality)
                            .or_default() += 1;
                        linked.push(existing.clone());
                        members.push(existing);
                        continue;
                    }
                    let id =
                        self.add_node(modality, depth, Some(parent.to_string()), payload, url)?;
                    *per_modality.entry(modality).or_default() += 1;
                    members.push(id);
                }
            }
        }
        let partial = [Modality::Image, Modality::Text]
            .iter()
            .any(|m| per_modality.get(m).copied().unwrap_or(0) < k);
        self.graph.edges.push(Hyperedge {
            id: edge_id.clone(),
            parent_node: parent.to_string(),
            members,
            linked,
            partial,
        });
        Ok(edge_id)
    }

    /// Reverse image search gives K text children, visual search K image children.
    pub fn expand_image_node(&mut self, id: &str) -> Result<String, HyperError> {
        let node = self.check_expandable(id, Modality::Image)?;
        let k = self.graph.config.k;
        let image = node.payload.clone();
        let failure = |source| HyperError::ProviderFailure {
            node: id.to_string(),
            source,
        };
        let images = self.provider.visual_search(&image, k).map_err(failure)?;
        let pages = self
            .provider
            .reverse_image_search(&image, k)
            .map_err(failure)?;
        let mut children: Vec<Child> = first_distinct(images, k)
            .into_iter()
            .map(|url| Child::New {
                modality: Modality::Image,
                payload: url.clone(),
                url,
            })
            .collect();
        children.extend(pages.into_iter().take(k).map(|p| Child::New {
            modality: Modality::Text,
            url: p.url,
            payload: p.text,
        }));
        self.attach(id, children)
    }

    /// The extractor picks up to K page URLs and K image links from the page.
    pub fn expand_text_node(&mut self, id: &str) -> Result<String, HyperError> {
        let node = self.check_expandable(id, Modality::Text)?;
        let k = self.graph.config.k;
        let page = node.payload.clone();
        let turns = [
            ChatTurn::system(EXTRACTOR_SYSTEM.replace("{K}", &k.to_string())),
            ChatTurn::user(page),
        ];
        let raw = complete(self.extractor, &turns, &[]).map_err(|source| HyperError::Model {
            node: id.to_string(),
            source,
        })?;
        let unparseable = || HyperError::ExtractionUnparseable {
            node: id.to_string(),
            raw: raw.clone(),
        };
        let obj = json_object(&raw).ok_or_else(unparseable)?;
        let urls = string_list(&obj, "urls").ok_or_else(unparseable)?;
        let images = string_list(&obj, "images").ok_or_else(unparseable)?;
        let mut children = Vec::new();
        for url in first_distinct(images, k) {
            children.push(match self.by_url.contains_key(&url) {
                true => Child::New {
                    modality: Modality::Image,
                    payload: String::new(),
                    url,
                },
                false => match self.provider.fetch_image(&url) {
                    Ok(payload) => Child::New {
                        modality: Modality::Image,
                        url,
                        payload,
                    },
                    Err(e) => Child::Failed {
                        url,
                        error: e.to_string(),
                    },
                },
            });
        }
        for url in first_distinct(urls, k) {
            children.push(match self.by_url.contains_key(&url) {
                true => Child::New {
                    modality: Modality::Text,
                    payload: String::new(),
                    url,
                },
                false => match self.provider.fetch_page(&url) {
                    Ok(p) => Child::New {
                        modality: Modality::Text,
                        url,
                        payload: p.text,
                    },
                    Err(e) => Child::Failed {
                        url,
                        error: e.to_string(),
                    },
                },
            });
        }
        self.attach(id, children)
    }

    pub fn expand(&mut self, id: &str) -> Result<String, HyperError> {
        match self.graph.node(id)?.modality {
            Modality::Image => self.expand_image_node(id),
            Modality::Text => self.expand_text_node(id),
        }
    }
}

pub fn expand_image_node(b: &mut GraphBuilder<'_>, id: &str) -> Result<String, HyperError> {
    b.expand_image_node(id)
}

pub fn expand_text_node(b: &mut GraphBuilder<'_>, id: &str) -> Result<String, HyperError> {
    b.expand_text_node(id)
}

/// Breadth-first growth from `seed` down to depth D, siblings in creation
/// order. Provider and extraction failures end only the affected branch and
/// are recorded; annotation failures abort the build.
pub fn build_hypergraph(
    seed: &str,
    config: HyperConfig,
    provider: &dyn SearchProvider,
    extractor: &dyn ModelClient,
    annotator: &dyn ModelClient,
) -> Result<Hypergraph, HyperError> {
    let mut b = GraphBuilder::new(seed, config, provider, extractor, annotator)?;
    let mut queue: VecDeque<String> = VecDeque::from([b.graph.nodes[0].id.clone()]);
    while let Some(id) = queue.pop_front() {
        if b.graph.node(&id)?.depth >= config.d {
            continue;
        }
        match b.expand(&id) {
            Ok(edge) => {
                let e = b.graph.edge(&edge).expect("edge just added");
                queue.extend(
                    e.members[1..]
                        .iter()
                        .filter(|m| !e.linked.contains(m))
                        .cloned(),
                );
            }
            Err(
                e @ (HyperError::ProviderFailure { .. } | HyperError::ExtractionUnparseable { .. }),
            ) => {
                log::warn!("{e}");
                b.graph.provenance.failures.push(BranchFailure {
                    node: id,
                    error: e.to_string(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(b.finish())
}
