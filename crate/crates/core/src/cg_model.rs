//! Call-graph domain types and the `.cg.json` interchange format.
//!
//! A document looks like
//!
//! ```text
//! {"meta":{"sample_id":"s1","sha256":"","packer_label":"upx","entry_ids":[0]},
//!  "nodes":[{"id":0,"kind":"entry","features":[2,120,120,0,1,3,40,2,0,2,0,1]}],
//!  "edges":[[0,0]]}
//! ```
//!
//! Serialization is canonical: nodes sorted by id, edges sorted
//! lexicographically, keys in a fixed order. Two equal graphs always
//! serialize to identical bytes, which the registry relies on for content
//! addressing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stub_extract::StubBranch;

/// Number of per-node features.
pub const NUM_FEATURES: usize = 12;

/// Feature names, in vector order.
pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "type",
    "size",
    "real_size",
    "is_pure",
    "calling_conventions",
    "n_basic_blocks",
    "n_instructions",
    "n_local_vars",
    "n_args",
    "edges",
    "indegree",
    "outdegree",
];

pub const FEAT_TYPE: usize = 0;
pub const FEAT_IS_PURE: usize = 3;
pub const FEAT_INDEGREE: usize = 10;
pub const FEAT_OUTDEGREE: usize = 11;

pub type FeatureVec = [f64; NUM_FEATURES];

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Entry,
    Internal,
    Import,
}

impl NodeKind {
    /// Numeric encoding stored in feature 0.
    pub fn code(self) -> f64 {
        match self {
            NodeKind::Internal => 0.0,
            NodeKind::Import => 1.0,
            NodeKind::Entry => 2.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Entry => "entry",
            NodeKind::Internal => "internal",
            NodeKind::Import => "import",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entry" => Ok(NodeKind::Entry),
            "internal" => Ok(NodeKind::Internal),
            "import" => Ok(NodeKind::Import),
            other => Err(Error::invalid(format!("unknown node kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub features: FeatureVec,
}

impl FunctionNode {
    /// Builds a node, overwriting feature 0 with the kind's code.
    pub fn new(id: NodeId, kind: NodeKind, mut features: FeatureVec) -> Self {
        features[FEAT_TYPE] = kind.code();
        FunctionNode { id, kind, features }
    }

    fn validate(&self) -> Result<()> {
        if self.features[FEAT_TYPE] != self.kind.code() {
            return Err(Error::integrity(format!(
                "node {}: type feature {} does not match kind `{}`",
                self.id, self.features[FEAT_TYPE], self.kind
            )));
        }
        for (i, &v) in self.features.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::integrity(format!(
                    "node {}: feature `{}` must be finite and non-negative, got {v}",
                    self.id, FEATURE_NAMES[i]
                )));
            }
        }
        let pure = self.features[FEAT_IS_PURE];
        if pure != 0.0 && pure != 1.0 {
            return Err(Error::integrity(format!(
                "node {}: is_pure must be 0 or 1, got {pure}",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GraphMeta {
    pub sample_id: String,
    #[serde(default)]
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub packer_label: Option<String>,
    pub entry_ids: Vec<NodeId>,
}

/// A directed call graph. Node and edge storage is ordered, so equality does
/// not depend on insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct CallGraph {
    nodes: BTreeMap<NodeId, FunctionNode>,
    edges: BTreeSet<(NodeId, NodeId)>,
    meta: GraphMeta,
}

impl CallGraph {
    /// Validating constructor. Duplicate node ids or duplicate edges are
    /// rejected; `entry_ids` is sorted and must reference entry-kind nodes.
    pub fn new(
        meta: GraphMeta,
        nodes: impl IntoIterator<Item = FunctionNode>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<Self> {
        let mut node_map = BTreeMap::new();
        for n in nodes {
            n.validate()?;
            let id = n.id;
            if node_map.insert(id, n).is_some() {
                return Err(Error::integrity(format!("duplicate node id {id}")));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (a, b) in edges {
            for end in [a, b] {
                if !node_map.contains_key(&end) {
                    return Err(Error::integrity(format!(
                        "edge ({a},{b}) references missing node {end}"
                    )));
                }
            }
            if !edge_set.insert((a, b)) {
                return Err(Error::integrity(format!("duplicate edge ({a},{b})")));
            }
        }
        let mut meta = meta;
        meta.entry_ids.sort_unstable();
        meta.entry_ids.dedup();
        if meta.entry_ids.is_empty() {
            return Err(Error::integrity("entry_ids must not be empty"));
        }
        for e in &meta.entry_ids {
            match node_map.get(e) {
                None => return Err(Error::integrity(format!("entry id {e} has no node"))),
                Some(n) if n.kind != NodeKind::Entry => {
                    return Err(Error::integrity(format!(
                        "entry id {e} refers to a node of kind `{}`",
                        n.kind
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(CallGraph {
            nodes: node_map,
            edges: edge_set,
            meta,
        })
    }

    pub fn meta(&self) -> &GraphMeta {
        &self.meta
    }

    pub fn sample_id(&self) -> &str {
        &self.meta.sample_id
    }

    pub fn packer_label(&self) -> Option<&str> {
        self.meta.packer_label.as_deref()
    }

    pub fn set_packer_label(&mut self, label: Option<String>) {
        self.meta.packer_label = label;
    }

    pub fn entry_ids(&self) -> &[NodeId] {
        &self.meta.entry_ids
    }

    pub fn node(&self, id: NodeId) -> Option<&FunctionNode> {
        self.nodes.get(&id)
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl ExactSizeIterator<Item = &FunctionNode> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl ExactSizeIterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    /// Edges in lexicographic order.
    pub fn edges(&self) -> impl ExactSizeIterator<Item = (NodeId, NodeId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains_node(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    /// Subgraph induced by `keep`, with the same metadata.
    pub fn induced(&self, keep: &BTreeSet<NodeId>) -> Result<CallGraph> {
        let nodes = self
            .nodes
            .values()
            .filter(|n| keep.contains(&n.id))
            .cloned();
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|(a, b)| keep.contains(a) && keep.contains(b));
        CallGraph::new(self.meta.clone(), nodes, edges)
    }

    pub fn to_json(&self) -> String {
        serialize_document(self, None)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: NodeId,
    kind: NodeKind,
    features: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawProvenance {
    pub branch_taken: StubBranch,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocument {
    meta: GraphMeta,
    nodes: Vec<RawNode>,
    edges: Vec<[NodeId; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<RawProvenance>,
}

pub(crate) fn parse_document(doc: &str) -> Result<(CallGraph, Option<RawProvenance>)> {
    let raw: RawDocument = serde_json::from_str(doc)?;
    let mut nodes = Vec::with_capacity(raw.nodes.len());
    for n in raw.nodes {
        let features: FeatureVec = n.features.as_slice().try_into().map_err(|_| {
            Error::integrity(format!(
                "node {}: expected {NUM_FEATURES} features, found {}",
                n.id,
                n.features.len()
            ))
        })?;
        nodes.push(FunctionNode {
            id: n.id,
            kind: n.kind,
            features,
        });
    }
    let edges = raw.edges.into_iter().map(|[a, b]| (a, b));
    let g = CallGraph::new(raw.meta, nodes, edges)?;
    Ok((g, raw.provenance))
}

pub(crate) fn serialize_document(g: &CallGraph, provenance: Option<StubBranch>) -> String {
    let raw = RawDocument {
        meta: g.meta.clone(),
        nodes: g
            .nodes
            .values()
            .map(|n| RawNode {
                id: n.id,
                kind: n.kind,
                features: n.features.to_vec(),
            })
            .collect(),
        edges: g.edges.iter().map(|&(a, b)| [a, b]).collect(),
        provenance: provenance.map(|branch_taken| RawProvenance { branch_taken }),
    };
    let mut out = serde_json::to_string(&raw).expect("graph documents always serialize");
    out.push('\n');
    out
}

/// Parses one interchange document. A `provenance` field, if present, is
/// accepted and dropped.
pub fn parse_graph(document: &str) -> Result<CallGraph> {
    parse_document(document).map(|(g, _)| g)
}

/// Canonical interchange text for `g`.
pub fn serialize_graph(g: &CallGraph) -> String {
    serialize_document(g, None)
}

/// Per-feature z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: FeatureVec,
    pub std: FeatureVec,
    pub computed_over: usize,
}

impl FeatureStats {
    pub fn validate(&self) -> Result<()> {
        if self.computed_over == 0 {
            return Err(Error::integrity("feature stats computed over zero nodes"));
        }
        if self
            .std
            .iter()
            .chain(self.mean.iter())
            .any(|v| !v.is_finite())
            || self.std.iter().any(|&s| s < 0.0)
        {
            return Err(Error::integrity(
                "feature stats must be finite with std >= 0",
            ));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of every feature over all nodes.
pub fn compute_feature_stats<'a, I>(graphs: I) -> Result<FeatureStats>
where
    I: IntoIterator<Item = &'a CallGraph>,
    I::IntoIter: Clone,
{
    let graphs = graphs.into_iter();
    let mut count = 0usize;
    let mut sum = [0.0; NUM_FEATURES];
    for n in graphs.clone().flat_map(|g| g.nodes()) {
        count += 1;
        for (s, x) in sum.iter_mut().zip(n.features) {
            *s += x;
        }
    }
    if count == 0 {
        return Err(Error::invalid(
            "cannot compute feature stats over zero nodes",
        ));
    }
    let mean = sum.map(|s| s / count as f64);
    let mut sq = [0.0; NUM_FEATURES];
    for n in graphs.flat_map(|g| g.nodes()) {
        for i in 0..NUM_FEATURES {
            let d = n.features[i] - mean[i];
            sq[i] += d * d;
        }
    }
    let std = sq.map(|s| (s / count as f64).sqrt());
    Ok(FeatureStats {
        mean,
        std,
        computed_over: count,
    })
}

/// Component-wise `(x - mean) / std`; zero-variance components map to 0.
pub fn normalize(features: &FeatureVec, stats: &FeatureStats) -> FeatureVec {
    let mut out = [0.0; NUM_FEATURES];
    for i in 0..NUM_FEATURES {
        out[i] = if stats.std[i] > 0.0 {
            (features[i] - stats.mean[i]) / stats.std[i]
        } else {
            0.0
        };
    }
    out
}
