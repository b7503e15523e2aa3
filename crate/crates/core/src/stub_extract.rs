//! Unpacking-stub extraction from a full call graph.
//!
//! Components are computed on the undirected view. The stub is the union of
//! the components holding an entry point that has at least one edge. When
//! every entry is isolated but the graph has edges, the entries are kept
//! together with the largest entry-free component. When the graph has no
//! edges at all, the entries are kept with every imported function.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cg_model::{parse_document, serialize_document, CallGraph, NodeId, NodeKind};
use crate::error::{Error, Result};

/// Which rule produced a stub.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StubBranch {
    EntryComponent,
    SecondComponent,
    NoEdgesFallback,
}

impl fmt::Display for StubBranch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StubBranch::EntryComponent => "entry_component",
            StubBranch::SecondComponent => "second_component",
            StubBranch::NoEdgesFallback => "no_edges_fallback",
        })
    }
}

/// A call graph reduced to its unpacking stub.
#[derive(Debug, Clone, PartialEq)]
pub struct StubGraph {
    pub graph: CallGraph,
    pub branch: StubBranch,
}

impl StubGraph {
    pub fn to_json(&self) -> String {
        serialize_document(&self.graph, Some(self.branch))
    }

    pub fn from_json(doc: &str) -> Result<StubGraph> {
        let (graph, prov) = parse_document(doc)?;
        let branch = prov
            .ok_or_else(|| Error::integrity("stub document is missing `provenance`"))?
            .branch_taken;
        Ok(StubGraph { graph, branch })
    }

    pub fn packer_label(&self) -> Option<&str> {
        self.graph.packer_label()
    }

    pub fn sample_id(&self) -> &str {
        self.graph.sample_id()
    }
}

/// Partition of node ids into undirected connected components, each sorted,
/// ordered by smallest member.
pub fn connected_components(g: &CallGraph) -> Vec<Vec<NodeId>> {
    let ids: Vec<NodeId> = g.node_ids().collect();
    let index: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();

    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }

    for (a, b) in g.edges() {
        let (ra, rb) = (find(&mut parent, index[&a]), find(&mut parent, index[&b]));
        if ra != rb {
            // keep the smaller index as root so roots are component minima
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
    }

    let mut groups: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(id);
    }
    groups.into_values().collect()
}

fn has_incident_edge(g: &CallGraph, id: NodeId) -> bool {
    g.edges().any(|(a, b)| a == id || b == id)
}

/// Reduces `g` to its statically visible unpacking stub.
pub fn extract_stub(g: &CallGraph) -> Result<StubGraph> {
    let entries: BTreeSet<NodeId> = g.entry_ids().iter().copied().collect();
    if entries.is_empty() {
        return Err(Error::integrity("graph has no entry points"));
    }
    if let Some(missing) = entries.iter().find(|e| !g.contains_node(**e)) {
        return Err(Error::integrity(format!("entry id {missing} has no node")));
    }

    let mut keep: BTreeSet<NodeId> = entries.clone();
    let branch = if g.edge_count() == 0 {
        keep.extend(
            g.nodes()
                .filter(|n| n.kind == NodeKind::Import)
                .map(|n| n.id),
        );
        StubBranch::NoEdgesFallback
    } else {
        let components = connected_components(g);
        let connected: Vec<NodeId> = entries
            .iter()
            .copied()
            .filter(|&e| has_incident_edge(g, e))
            .collect();
        if !connected.is_empty() {
            for comp in &components {
                if comp.iter().any(|id| connected.contains(id)) {
                    keep.extend(comp.iter().copied());
                }
            }
            StubBranch::EntryComponent
        } else {
            // Components are ordered by minimum id, so taking the first of
            // the maximal size breaks ties towards the smallest id.
            let second = components
                .iter()
                .filter(|c| !c.iter().any(|id| entries.contains(id)))
                .fold(None::<&Vec<NodeId>>, |best, c| match best {
                    Some(b) if b.len() >= c.len() => Some(b),
                    _ => Some(c),
                });
            if let Some(c) = second {
                keep.extend(c.iter().copied());
            }
            StubBranch::SecondComponent
        }
    };

    Ok(StubGraph {
        graph: g.induced(&keep)?,
        branch,
    })
}
