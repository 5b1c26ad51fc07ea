//! Storage and indexing of streaming multi-relational graph parts.
//!
//! A stream is an ordered list of [`GraphPart`]s, each carrying its own
//! train/validation/query splits. The [`AdjacencyIndex`] built over the
//! train sets of a prefix of the stream backs all neighbor queries used
//! when old triples are activated for replay.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// One (head, relation, tail) edge over dense integer ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: u32,
    pub relation: u32,
    pub tail: u32,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Triple { head, relation, tail }
    }

    /// True if `node` is the head or the tail of this triple.
    pub fn contains(&self, node: u32) -> bool {
        self.head == node || self.tail == node
    }
}

/// A node together with its class label, for node-classification streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledNode {
    pub node: u32,
    pub label: u32,
}

/// One part of the stream with its three splits.
///
/// In link-prediction mode the triple splits carry the data and the node
/// splits are empty. In node-classification mode `train` holds the part's
/// edges (the structure new in this part) while the labeled node splits
/// carry the classification instances.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GraphPart {
    pub index: usize,
    pub train: Vec<Triple>,
    pub validation: Vec<Triple>,
    pub query: Vec<Triple>,
    #[serde(default)]
    pub train_nodes: Vec<LabeledNode>,
    #[serde(default)]
    pub validation_nodes: Vec<LabeledNode>,
    #[serde(default)]
    pub query_nodes: Vec<LabeledNode>,
}

impl GraphPart {
    pub fn empty(index: usize) -> Self {
        GraphPart { index, ..Default::default() }
    }

    /// All triples of the part regardless of split.
    pub fn all_triples(&self) -> impl Iterator<Item = &Triple> {
        self.train.iter().chain(&self.validation).chain(&self.query)
    }
}

/// Task a stream was split for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    LinkPrediction,
    NodeClassification,
}

/// The full stream: ordered parts plus global id spaces and, for
/// node-classification data, per-node features and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDataset<T> {
    pub mode: StreamMode,
    pub parts: Vec<GraphPart>,
    pub node_count: usize,
    pub relation_count: usize,
    /// Human-readable entity names, indexed by id (first-appearance order).
    pub node_names: Vec<String>,
    /// Human-readable relation names, indexed by id.
    pub relation_names: Vec<String>,
    #[serde(default)]
    pub node_features: Option<Vec<Vec<T>>>,
    #[serde(default)]
    pub node_labels: Option<Vec<u32>>,
    #[serde(default)]
    pub num_classes: usize,
}

impl<T> StreamDataset<T> {
    /// Entities that have appeared in any split of parts `0..=upto`,
    /// sorted ascending. This is the candidate pool for filtered ranking
    /// and the corruption pool for negative sampling.
    pub fn seen_entities(&self, upto: usize) -> Vec<u32> {
        let mut seen = BTreeSet::new();
        for part in &self.parts[..=upto.min(self.parts.len() - 1)] {
            for t in part.all_triples() {
                seen.insert(t.head);
                seen.insert(t.tail);
            }
            for ln in part
                .train_nodes
                .iter()
                .chain(&part.validation_nodes)
                .chain(&part.query_nodes)
            {
                seen.insert(ln.node);
            }
        }
        seen.into_iter().collect()
    }

    /// Every triple (all splits) of parts `0..=upto`, the closed-world
    /// filter for negative sampling and the filtered ranking protocol.
    pub fn known_triples(&self, upto: usize) -> std::collections::HashSet<Triple> {
        let mut set = std::collections::HashSet::new();
        for part in &self.parts[..=upto.min(self.parts.len() - 1)] {
            set.extend(part.all_triples().copied());
        }
        set
    }
}

/// Immutable per-node incidence lists over the train sets of a stream
/// prefix. A triple appears in the lists of exactly its head and its
/// tail (twice in the same list for self-loops).
#[derive(Debug, Clone)]
pub struct AdjacencyIndex {
    incident: Vec<Vec<Triple>>,
}

/// Builds the incidence index over the union of the train sets of parts
/// `0..=upto`.
pub fn build_adjacency(parts: &[GraphPart], upto: usize) -> Result<AdjacencyIndex> {
    if upto >= parts.len() {
        return Err(Error::Data(format!(
            "part index {upto} out of range for {}-part stream",
            parts.len()
        )));
    }
    let mut max_node = 0u32;
    for part in &parts[..=upto] {
        for t in &part.train {
            max_node = max_node.max(t.head).max(t.tail);
        }
    }
    let mut incident = vec![Vec::new(); max_node as usize + 1];
    for part in &parts[..=upto] {
        for &t in &part.train {
            incident[t.head as usize].push(t);
            incident[t.tail as usize].push(t);
        }
    }
    Ok(AdjacencyIndex { incident })
}

impl AdjacencyIndex {
    /// Incidence list of `node`; unknown ids yield the empty slice.
    pub fn incident(&self, node: u32) -> &[Triple] {
        self.incident
            .get(node as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Number of indexed triples (each counted once).
    pub fn triple_count(&self) -> usize {
        // every triple is listed twice (head + tail, or twice for loops)
        self.incident.iter().map(Vec::len).sum::<usize>() / 2
    }
}

/// Neighbor triples of `t` at the given order, excluding `t` itself.
///
/// Order 1 collects every indexed triple containing `t.head` or `t.tail`.
/// Order 2 additionally collects triples containing any node that
/// co-occurs in an order-1 neighbor triple.
pub fn triple_neighbors(t: &Triple, index: &AdjacencyIndex, order: u8) -> BTreeSet<Triple> {
    debug_assert!(order == 1 || order == 2, "neighbor order must be 1 or 2");
    let mut out = BTreeSet::new();
    let mut frontier_nodes = BTreeSet::new();
    for &node in &[t.head, t.tail] {
        for cand in index.incident(node) {
            if cand != t {
                out.insert(*cand);
                frontier_nodes.insert(cand.head);
                frontier_nodes.insert(cand.tail);
            }
        }
    }
    if order >= 2 {
        for node in frontier_nodes {
            for cand in index.incident(node) {
                if cand != t {
                    out.insert(*cand);
                }
            }
        }
    }
    out
}

/// Nodes sharing an indexed triple with `u`, always including `u` itself.
pub fn node_neighbors(u: u32, index: &AdjacencyIndex) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    out.insert(u);
    for t in index.incident(u) {
        out.insert(t.head);
        out.insert(t.tail);
    }
    out
}
