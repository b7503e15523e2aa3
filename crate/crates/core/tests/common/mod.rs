//! Independent reference implementations and generators shared by the
//! integration tests. Nothing here calls the code under test except to
//! build its input types.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stubmatch::cg_model::{
    parse_graph, CallGraph, FeatureStats, FunctionNode, GraphMeta, NodeId, NodeKind, NUM_FEATURES,
};
use stubmatch::cluster::{Cluster, ClusterOptions, DistanceMatrix};
use stubmatch::gmn::{GmnConfig, GmnParams, Similarity};
use stubmatch::registry::{PackerEntry, Registry};
use stubmatch::stub_extract::StubGraph;

pub fn fixture(name: &str) -> CallGraph {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    parse_graph(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Random valid call graph with `n` nodes. `edge_p` is the chance of each
/// ordered pair being an edge, so sparse values leave several components.
pub fn random_graph(rng: &mut ChaCha8Rng, n: u32, edge_p: f64, entries: usize) -> CallGraph {
    let entries = entries.clamp(1, n as usize);
    let entry_ids: Vec<NodeId> = (0..entries as u32).collect();
    let nodes: Vec<FunctionNode> = (0..n)
        .map(|i| {
            let kind = if (i as usize) < entries {
                NodeKind::Entry
            } else if rng.random_bool(0.3) {
                NodeKind::Import
            } else {
                NodeKind::Internal
            };
            let mut f = [0.0; NUM_FEATURES];
            for v in f.iter_mut().skip(1) {
                *v = rng.random_range(0..30) as f64;
            }
            f[3] = rng.random_range(0..2) as f64;
            FunctionNode::new(i, kind, f)
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if rng.random_bool(edge_p) {
                edges.push((a, b));
            }
        }
    }
    CallGraph::new(
        GraphMeta {
            sample_id: format!("rand-{}", rng.random::<u32>()),
            entry_ids,
            ..Default::default()
        },
        nodes,
        edges,
    )
    .unwrap()
}

/// Same graph with node ids renamed by `perm[old] = new`.
pub fn relabel(g: &CallGraph, perm: &[NodeId]) -> CallGraph {
    let nodes = g
        .nodes()
        .map(|n| FunctionNode::new(perm[n.id as usize], n.kind, n.features))
        .collect::<Vec<_>>();
    let edges = g
        .edges()
        .map(|(a, b)| (perm[a as usize], perm[b as usize]))
        .collect::<Vec<_>>();
    let mut meta = g.meta().clone();
    meta.entry_ids = meta.entry_ids.iter().map(|&e| perm[e as usize]).collect();
    meta.entry_ids.sort_unstable();
    CallGraph::new(meta, nodes, edges).unwrap()
}

/// Undirected reachability by Warshall's closure, `O(n^3)`.
pub fn reachability(g: &CallGraph) -> (Vec<NodeId>, Vec<Vec<bool>>) {
    let ids: Vec<NodeId> = g.node_ids().collect();
    let n = ids.len();
    let pos: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut r = vec![vec![false; n]; n];
    for (i, row) in r.iter_mut().enumerate() {
        row[i] = true;
    }
    for (a, b) in g.edges() {
        let (i, j) = (pos[&a], pos[&b]);
        r[i][j] = true;
        r[j][i] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if r[i][k] {
                let via = r[k].clone();
                for (cell, reach) in r[i].iter_mut().zip(via) {
                    *cell |= reach;
                }
            }
        }
    }
    (ids, r)
}

pub fn components_oracle(g: &CallGraph) -> BTreeSet<BTreeSet<NodeId>> {
    let (ids, r) = reachability(g);
    (0..ids.len())
        .map(|i| {
            (0..ids.len())
                .filter(|&j| r[i][j])
                .map(|j| ids[j])
                .collect()
        })
        .collect()
}

/// Expected stub node set, written straight from the heuristic's three
/// cases over the closure oracle.
pub fn stub_oracle(g: &CallGraph) -> BTreeSet<NodeId> {
    let entries: BTreeSet<NodeId> = g.entry_ids().iter().copied().collect();
    if g.edge_count() == 0 {
        let mut s = entries;
        s.extend(
            g.nodes()
                .filter(|n| n.kind == NodeKind::Import)
                .map(|n| n.id),
        );
        return s;
    }
    let comps = components_oracle(g);
    let touched: Vec<NodeId> = entries
        .iter()
        .copied()
        .filter(|&e| g.edges().any(|(a, b)| a == e || b == e))
        .collect();
    let mut s = entries.clone();
    if !touched.is_empty() {
        for c in &comps {
            if touched.iter().any(|e| c.contains(e)) {
                s.extend(c);
            }
        }
    } else {
        let best = comps
            .iter()
            .filter(|c| c.is_disjoint(&entries))
            .max_by(|x, y| {
                x.len()
                    .cmp(&y.len())
                    .then(y.first().unwrap().cmp(x.first().unwrap()))
            });
        if let Some(c) = best {
            s.extend(c);
        }
    }
    s
}

/// Online mean and population variance.
pub fn welford_stats(graphs: &[CallGraph]) -> FeatureStats {
    let mut n = 0usize;
    let mut mean = [0.0; NUM_FEATURES];
    let mut m2 = [0.0; NUM_FEATURES];
    for g in graphs {
        for node in g.nodes() {
            n += 1;
            for k in 0..NUM_FEATURES {
                let x = node.features[k];
                let d = x - mean[k];
                mean[k] += d / n as f64;
                m2[k] += d * (x - mean[k]);
            }
        }
    }
    let mut std = [0.0; NUM_FEATURES];
    for k in 0..NUM_FEATURES {
        std[k] = (m2[k] / n as f64).sqrt();
    }
    FeatureStats {
        mean,
        std,
        computed_over: n,
    }
}

pub fn random_distances(rng: &mut ChaCha8Rng, n: usize) -> DistanceMatrix {
    DistanceMatrix::from_fn(n, |_, _| rng.random_range(0.0..2.0))
}

/// Single-linkage merge heights equal the minimum spanning tree's edge
/// weights; Prim's algorithm on the dense matrix, sorted ascending.
pub fn mst_weights(d: &DistanceMatrix) -> Vec<f64> {
    let n = d.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut out = Vec::new();
    best[0] = 0.0;
    for step in 0..n {
        let u = (0..n)
            .filter(|&i| !in_tree[i])
            .min_by(|&a, &b| best[a].partial_cmp(&best[b]).unwrap())
            .unwrap();
        in_tree[u] = true;
        if step > 0 {
            out.push(best[u]);
        }
        for v in 0..n {
            if !in_tree[v] && d.get(u, v) < best[v] {
                best[v] = d.get(u, v);
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

/// Mean silhouette straight from the definition: singletons count 0.
pub fn silhouette_direct(d: &DistanceMatrix, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| d.get(i, j)).sum::<f64>() / own.len() as f64;
        let others: BTreeSet<usize> = labels.iter().copied().filter(|&l| l != labels[i]).collect();
        let b = others
            .iter()
            .map(|&l| {
                let m: Vec<usize> = (0..n).filter(|&j| labels[j] == l).collect();
                m.iter().map(|&j| d.get(i, j)).sum::<f64>() / m.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let den = a.max(b);
        if den > 0.0 {
            total += (b - a) / den;
        }
    }
    total / n as f64
}

/// Member with the least summed distance, smallest index on ties.
pub fn medoid_exhaustive(d: &DistanceMatrix, members: &[usize]) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &i in members {
        let s: f64 = members.iter().map(|&j| d.get(i, j)).sum();
        if s < best.0 || (s == best.0 && i < best.1) {
            best = (s, i);
        }
    }
    best.1
}

/// Similarity looked up by sample id pair; unknown pairs get `default`.
pub struct TableSimilarity {
    pub table: BTreeMap<(String, String), f64>,
    pub default: f64,
}

impl TableSimilarity {
    pub fn new(default: f64) -> Self {
        TableSimilarity {
            table: BTreeMap::new(),
            default,
        }
    }

    pub fn set(&mut self, a: &str, b: &str, s: f64) {
        self.table.insert((a.into(), b.into()), s);
        self.table.insert((b.into(), a.into()), s);
    }
}

impl Similarity for TableSimilarity {
    fn similarity(&self, a: &StubGraph, b: &StubGraph) -> stubmatch::Result<f64> {
        if a.sample_id() == b.sample_id() {
            return Ok(1.0);
        }
        Ok(*self
            .table
            .get(&(a.sample_id().into(), b.sample_id().into()))
            .unwrap_or(&self.default))
    }
}

/// One-node stub named `id` with the given label.
pub fn tiny_stub(id: &str, label: Option<&str>) -> StubGraph {
    let g = CallGraph::new(
        GraphMeta {
            sample_id: id.into(),
            packer_label: label.map(String::from),
            entry_ids: vec![0],
            ..Default::default()
        },
        vec![FunctionNode::new(0, NodeKind::Entry, [0.0; NUM_FEATURES])],
        vec![],
    )
    .unwrap();
    stubmatch::stub_extract::extract_stub(&g).unwrap()
}

/// Registry whose graphs are tiny stubs keyed by sample id, with clusters
/// given as `(packer, members, threshold)`; the first member is the medoid.
/// The network is untrained; tests pair it with a table similarity.
pub fn table_registry(clusters: &[(&str, Vec<String>, f64)]) -> Registry {
    let mut graphs = BTreeMap::new();
    let mut packers: BTreeMap<String, PackerEntry> = BTreeMap::new();
    for (packer, members, threshold) in clusters {
        for m in members {
            graphs.insert(m.clone(), tiny_stub(m, Some(packer)));
        }
        let entry = packers.entry(packer.to_string()).or_insert(PackerEntry {
            flat_threshold: *threshold,
            clusters: vec![],
        });
        entry.clusters.push(Cluster {
            packer: packer.to_string(),
            member_ids: members.clone(),
            medoid_id: members[0].clone(),
            threshold: *threshold,
            low_confidence: members.len() == 1,
        });
    }
    let reg = Registry {
        params: GmnParams::init(&GmnConfig::default()).unwrap(),
        stats: FeatureStats {
            mean: [0.0; NUM_FEATURES],
            std: [1.0; NUM_FEATURES],
            computed_over: 1,
        },
        options: ClusterOptions::default(),
        graphs,
        packers,
        audit: vec![],
    };
    reg.check_integrity().unwrap();
    reg
}

pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Network small enough for fast training in tests.
pub fn small_config(seed: u64) -> GmnConfig {
    GmnConfig {
        node_hidden_dim: 16,
        message_dim: 16,
        propagation_rounds: 2,
        epochs: 8,
        pairs_per_epoch: 96,
        batch_pairs: 16,
        fine_tune_epochs: 6,
        seed,
        ..Default::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
