//! Intra-packer hierarchical clustering.
//!
//! For one packer: pairwise distances `1 - cos` from the network, a
//! single-linkage dendrogram, the flat cut with the best silhouette score,
//! singleton clusters folded into their nearest neighbour, then a medoid and
//! an acceptance threshold per cluster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmn::Similarity;
use crate::stub_extract::StubGraph;

/// Symmetric matrix of pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn zeros(n: usize) -> Self {
        DistanceMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    /// Builds from an upper-triangle function `f(i, j)` with `i < j`.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut d = DistanceMatrix::zeros(n);
        for i in 0..n {
            for j in i + 1..n {
                d.set(i, j, f(i, j));
            }
        }
        d
    }

    /// Rows must form a symmetric, zero-diagonal matrix with entries in
    /// `[0, 2]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut d = DistanceMatrix::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid("distance matrix must be square"));
            }
            d.data[i * n..(i + 1) * n].copy_from_slice(row);
        }
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.n {
            if self.get(i, i) != 0.0 {
                return Err(Error::invalid("distance matrix diagonal must be zero"));
            }
            for j in 0..self.n {
                let v = self.get(i, j);
                if v != self.get(j, i) || !(0.0..=2.0).contains(&v) {
                    return Err(Error::invalid(format!(
                        "distance ({i},{j}) = {v} is asymmetric or outside [0, 2]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }
}

/// Pairwise `1 - similarity` for graphs of a single packer. Each unordered
/// pair is evaluated once and mirrored.
pub fn build_distance_matrix(graphs: &[StubGraph], sim: &dyn Similarity) -> Result<DistanceMatrix> {
    if graphs.is_empty() {
        return Err(Error::invalid(
            "cannot build a distance matrix over zero graphs",
        ));
    }
    let label = graphs[0].packer_label();
    if graphs.iter().any(|g| g.packer_label() != label) {
        return Err(Error::invalid(
            "distance matrices are built per packer; graphs carry mixed labels",
        ));
    }
    let n = graphs.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    let dists: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            sim.similarity(&graphs[i], &graphs[j])
                .map(|s| (1.0 - s).clamp(0.0, 2.0))
        })
        .collect::<Result<_>>()?;
    let mut d = DistanceMatrix::zeros(n);
    for (&(i, j), v) in pairs.iter().zip(dists) {
        d.set(i, j, v);
    }
    Ok(d)
}

/// One agglomeration step. Leaves are `0..n`; the cluster created by merge
/// `k` has id `n + k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Flat labels obtained by undoing the last `k - 1` merges. Labels are
    /// numbered by each cluster's smallest member.
    pub fn cut(&self, k: usize) -> Vec<usize> {
        let n = self.leaves;
        let k = k.clamp(1, n.max(1));
        let mut parent: Vec<usize> = (0..2 * n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (step, m) in self.merges.iter().take(n - k).enumerate() {
            let id = n + step;
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = id;
            parent[rb] = id;
        }
        canonical_labels(&(0..n).map(|i| find(&mut parent, i)).collect::<Vec<_>>())
    }
}

/// Relabels so that clusters are numbered 0.. in order of first appearance.
fn canonical_labels(raw: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
    raw.iter()
        .map(|r| match seen.iter().position(|s| s == r) {
            Some(p) => p,
            None => {
                seen.push(*r);
                seen.len() - 1
            }
        })
        .collect()
}

/// Agglomerative single-linkage clustering. At every step the two active
/// clusters at minimum distance merge; ties go to the pair whose smallest
/// members are lexicographically smallest.
pub fn single_linkage_dendrogram(d: &DistanceMatrix) -> Dendrogram {
    let n = d.len();
    // active clusters: (id, smallest member, size); distances between active
    // clusters kept in `dist` indexed by slot
    let mut slots: Vec<Option<(usize, usize, usize)>> = (0..n).map(|i| Some((i, i, 1))).collect();
    let mut dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| d.get(i, j)).collect())
        .collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..n {
            let Some((_, min_i, _)) = slots[i] else {
                continue;
            };
            for j in i + 1..n {
                let Some((_, min_j, _)) = slots[j] else {
                    continue;
                };
                let (lo, hi) = if min_i < min_j {
                    (min_i, min_j)
                } else {
                    (min_j, min_i)
                };
                let cand = (dist[i][j], lo, hi, i, j);
                let better = match best {
                    None => true,
                    Some(b) => (cand.0, cand.1, cand.2) < (b.0, b.1, b.2),
                };
                if better {
                    best = Some(cand);
                }
            }
        }
        let (height, _, _, i, j) = best.expect("at least two active clusters");
        let (id_i, min_i, size_i) = slots[i].unwrap();
        let (id_j, min_j, size_j) = slots[j].unwrap();
        let (a, b) = if id_i < id_j {
            (id_i, id_j)
        } else {
            (id_j, id_i)
        };
        merges.push(Merge {
            a,
            b,
            height,
            size: size_i + size_j,
        });
        #[allow(clippy::needless_range_loop)]
        for k in 0..n {
            let v = dist[i][k].min(dist[j][k]);
            dist[i][k] = v;
            dist[k][i] = v;
        }
        slots[i] = Some((n + step, min_i.min(min_j), size_i + size_j));
        slots[j] = None;
    }
    Dendrogram { leaves: n, merges }
}

/// Mean silhouette over all points; singleton members contribute 0.
pub fn silhouette_score(d: &DistanceMatrix, labels: &[usize]) -> Result<f64> {
    let n = d.len();
    if labels.len() != n {
        return Err(Error::invalid("one label per point required"));
    }
    if n < 3 {
        return Err(Error::invalid("silhouette needs at least three points"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::invalid(
            "silhouette is undefined for a single cluster",
        ));
    }
    let mut total = 0.0;
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d.get(i, j);
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != labels[i] && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Member with the smallest total distance to the others; ties go to the
/// smallest index.
pub fn medoid(d: &DistanceMatrix, members: &[usize]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for &m in members {
        let cost: f64 = members.iter().map(|&o| d.get(m, o)).sum();
        match best {
            Some((c, idx)) if c < cost || (c == cost && idx < m) => {}
            _ => best = Some((cost, m)),
        }
    }
    best.map(|(_, m)| m)
        .ok_or_else(|| Error::invalid("medoid of an empty member list"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterOptions {
    /// Largest flat-cut size evaluated.
    pub k_max: usize,
    /// Best silhouette below this keeps a single cluster.
    pub s_min: f64,
    /// Threshold assigned to one-member clusters.
    pub singleton_threshold: f64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            k_max: 10,
            s_min: 0.25,
            singleton_threshold: 0.9,
        }
    }
}

/// Clustering result over matrix indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexCluster {
    pub members: Vec<usize>,
    pub medoid: usize,
    pub threshold: f64,
    pub low_confidence: bool,
}

/// Mean pairwise similarity `1 - d` over distinct unordered pairs, minus the
/// population standard deviation of those similarities. `None` for fewer
/// than two members.
pub fn similarity_threshold(d: &DistanceMatrix, members: &[usize]) -> Option<f64> {
    let sims: Vec<f64> = members
        .iter()
        .enumerate()
        .flat_map(|(x, &i)| members[x + 1..].iter().map(move |&j| (i, j)))
        .map(|(i, j)| 1.0 - d.get(i, j))
        .collect();
    if sims.is_empty() {
        return None;
    }
    let n = sims.len() as f64;
    let mean = sims.iter().sum::<f64>() / n;
    let var = sims.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Some(mean - var.sqrt())
}

/// Number of flat clusters chosen by the silhouette sweep.
pub fn choose_k(d: &DistanceMatrix, dendro: &Dendrogram, opts: &ClusterOptions) -> usize {
    let n = d.len();
    if n < 3 {
        return 1;
    }
    let mut best = (f64::NEG_INFINITY, 1);
    for k in 2..=opts.k_max.min(n - 1) {
        let labels = dendro.cut(k);
        if let Ok(s) = silhouette_score(d, &labels) {
            if s > best.0 {
                best = (s, k);
            }
        }
    }
    if best.0 < opts.s_min {
        1
    } else {
        best.1
    }
}

/// Folds every one-member group into the group at minimum single-linkage
/// distance, until no singleton remains or only one group is left.
fn merge_singletons(d: &DistanceMatrix, mut groups: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    while groups.len() > 1 {
        let Some(s) = groups.iter().position(|g| g.len() == 1) else {
            break;
        };
        let point = groups[s][0];
        let target = (0..groups.len())
            .filter(|&g| g != s)
            .map(|g| {
                let link = groups[g]
                    .iter()
                    .map(|&m| d.get(point, m))
                    .fold(f64::INFINITY, f64::min);
                (link, g)
            })
            .fold(None::<(f64, usize)>, |best, c| match best {
                Some(b) if b.0 <= c.0 => Some(b),
                _ => Some(c),
            })
            .expect("another group exists")
            .1;
        groups[target].push(point);
        groups[target].sort_unstable();
        groups.remove(s);
    }
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Full per-packer clustering on a precomputed matrix.
pub fn cluster_distances(d: &DistanceMatrix, opts: &ClusterOptions) -> Result<Vec<IndexCluster>> {
    let n = d.len();
    if n == 0 {
        return Err(Error::invalid("cannot cluster zero graphs"));
    }
    let dendro = single_linkage_dendrogram(d);
    let k = choose_k(d, &dendro, opts);
    let labels = dendro.cut(k);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    let groups = merge_singletons(d, groups);
    groups
        .into_iter()
        .map(|members| {
            let medoid = medoid(d, &members)?;
            let (threshold, low_confidence) = match similarity_threshold(d, &members) {
                Some(t) => (t, false),
                None => (opts.singleton_threshold, true),
            };
            Ok(IndexCluster {
                members,
                medoid,
                threshold,
                low_confidence,
            })
        })
        .collect()
}

/// A packer-pure group of stored graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub packer: String,
    pub member_ids: Vec<String>,
    pub medoid_id: String,
    pub threshold: f64,
    /// Set for one-member clusters, whose threshold is the fixed fallback.
    #[serde(default)]
    pub low_confidence: bool,
}

/// Clusters plus the packer-wide threshold used by the unclustered baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PackerClustering {
    pub clusters: Vec<Cluster>,
    pub flat_threshold: f64,
    pub distances: DistanceMatrix,
}

/// Clusters the graphs of one packer. `ids[i]` names `graphs[i]`.
pub fn cluster_packer(
    graphs: &[StubGraph],
    ids: &[String],
    sim: &dyn Similarity,
    opts: &ClusterOptions,
) -> Result<PackerClustering> {
    if ids.len() != graphs.len() {
        return Err(Error::invalid("one id per graph required"));
    }
    let d = build_distance_matrix(graphs, sim)?;
    let packer = graphs[0]
        .packer_label()
        .ok_or_else(|| Error::invalid("graphs must carry a packer label"))?
        .to_string();
    let clusters = cluster_distances(&d, opts)?
        .into_iter()
        .map(|c| Cluster {
            packer: packer.clone(),
            member_ids: c.members.iter().map(|&i| ids[i].clone()).collect(),
            medoid_id: ids[c.medoid].clone(),
            threshold: c.threshold,
            low_confidence: c.low_confidence,
        })
        .collect();
    let all: Vec<usize> = (0..graphs.len()).collect();
    let flat_threshold = similarity_threshold(&d, &all).unwrap_or(opts.singleton_threshold);
    Ok(PackerClustering {
        clusters,
        flat_threshold,
        distances: d,
    })
}
