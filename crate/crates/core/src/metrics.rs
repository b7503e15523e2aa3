//! Evaluation: one-vs-rest metrics, inference-call benchmarks, integration
//! cost, and a synthetic packer-family generator standing in for a corpus of
//! real packed binaries.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cg_model::{
    CallGraph, FeatureVec, FunctionNode, GraphMeta, NodeId, NodeKind, FEAT_INDEGREE, FEAT_IS_PURE,
    FEAT_OUTDEGREE, FEAT_TYPE, NUM_FEATURES,
};
use crate::cluster::ClusterOptions;
use crate::error::{Error, Result};
use crate::gmn::GmnConfig;
use crate::identify::{Clustered, Flat, IdentificationResult, IdentifyStrategy};
use crate::registry::{configure, Registry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateNode {
    pub kind: NodeKind,
    pub features: FeatureVec,
}

/// Skeleton of a family's call graphs. Node ids are positions in `nodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub nodes: Vec<TemplateNode>,
    pub edges: Vec<(NodeId, NodeId)>,
    /// Features of extra caller/callee pairs not reachable from any entry.
    pub decoys: Vec<(FeatureVec, FeatureVec)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// Chance, per template node, of growing one extra node: a callee of an
    /// internal function, or an import when the template has no edges.
    pub node_add_prob: f64,
    /// Relative standard deviation of multiplicative feature noise.
    pub feature_noise_scale: f64,
    /// Chance, per edge, of reversing its direction.
    pub edge_flip_prob: f64,
}

impl Perturbation {
    pub const NONE: Perturbation = Perturbation {
        node_add_prob: 0.0,
        feature_noise_scale: 0.0,
        edge_flip_prob: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub packer_name: String,
    pub template: Template,
    pub perturbation: Perturbation,
    pub seed: u64,
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.perturbation;
        for (name, v) in [
            ("node_add_prob", p.node_add_prob),
            ("edge_flip_prob", p.edge_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(p.feature_noise_scale >= 0.0 && p.feature_noise_scale.is_finite()) {
            return Err(Error::invalid(
                "feature_noise_scale must be finite and non-negative",
            ));
        }
        if !self
            .template
            .nodes
            .iter()
            .any(|n| n.kind == NodeKind::Entry)
        {
            return Err(Error::invalid("template has no entry node"));
        }
        Ok(())
    }
}

fn noisy(v: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    if scale == 0.0 {
        return v;
    }
    let z: f64 = StandardNormal.sample(rng);
    (v * (1.0 + scale * z)).max(0.0)
}

/// Samples `n` labeled call graphs from a family. Degree features are
/// recomputed on each full graph.
pub fn generate_family(spec: &FamilySpec, n: usize) -> Result<Vec<CallGraph>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("family size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let t = &spec.template;
    let p = spec.perturbation;
    let has_edges = !t.edges.is_empty();
    (0..n)
        .map(|i| {
            let mut nodes: Vec<(NodeKind, FeatureVec)> = t
                .nodes
                .iter()
                .map(|tn| {
                    let mut f = tn.features;
                    for (j, v) in f.iter_mut().enumerate() {
                        if ![FEAT_TYPE, FEAT_IS_PURE, FEAT_INDEGREE, FEAT_OUTDEGREE].contains(&j) {
                            *v = noisy(*v, p.feature_noise_scale, &mut rng);
                        }
                    }
                    (tn.kind, f)
                })
                .collect();
            let mut edges: Vec<(NodeId, NodeId)> = t
                .edges
                .iter()
                .map(|&(a, b)| {
                    if rng.random_bool(p.edge_flip_prob) {
                        (b, a)
                    } else {
                        (a, b)
                    }
                })
                .collect();

            for parent in 0..t.nodes.len() {
                if !rng.random_bool(p.node_add_prob) {
                    continue;
                }
                let id = nodes.len() as NodeId;
                if has_edges {
                    // A call from an entry could move the stub to another
                    // component, so only internal functions grow callees.
                    if nodes[parent].0 != NodeKind::Internal {
                        continue;
                    }
                    let mut f = nodes[parent].1;
                    f[FEAT_TYPE] = NodeKind::Internal.code();
                    nodes.push((NodeKind::Internal, f));
                    edges.push((parent as NodeId, id));
                } else {
                    let mut f = nodes[parent].1;
                    f[FEAT_TYPE] = NodeKind::Import.code();
                    nodes.push((NodeKind::Import, f));
                }
            }

            for (fa, fb) in &t.decoys {
                let a = nodes.len() as NodeId;
                for f in [fa, fb] {
                    let mut f = *f;
                    for (j, v) in f.iter_mut().enumerate() {
                        if ![FEAT_TYPE, FEAT_IS_PURE, FEAT_INDEGREE, FEAT_OUTDEGREE].contains(&j) {
                            *v = noisy(*v, p.feature_noise_scale, &mut rng);
                        }
                    }
                    f[FEAT_TYPE] = NodeKind::Internal.code();
                    nodes.push((NodeKind::Internal, f));
                }
                edges.push((a, a + 1));
            }

            edges.sort_unstable();
            edges.dedup();
            let mut indeg = vec![0usize; nodes.len()];
            let mut outdeg = vec![0usize; nodes.len()];
            for &(a, b) in &edges {
                outdeg[a as usize] += 1;
                indeg[b as usize] += 1;
            }
            let entry_ids: Vec<NodeId> = nodes
                .iter()
                .enumerate()
                .filter(|(_, (k, _))| *k == NodeKind::Entry)
                .map(|(id, _)| id as NodeId)
                .collect();
            let nodes: Vec<FunctionNode> = nodes
                .into_iter()
                .enumerate()
                .map(|(id, (kind, mut f))| {
                    f[FEAT_INDEGREE] = indeg[id] as f64;
                    f[FEAT_OUTDEGREE] = outdeg[id] as f64;
                    FunctionNode::new(id as NodeId, kind, f)
                })
                .collect();
            CallGraph::new(
                GraphMeta {
                    sample_id: format!("{}-{:016x}-{i}", spec.packer_name, spec.seed),
                    sha256: String::new(),
                    packer_label: Some(spec.packer_name.clone()),
                    entry_ids,
                },
                nodes,
                edges,
            )
        })
        .collect()
}

fn random_features(rng: &mut ChaCha8Rng, kind: NodeKind) -> FeatureVec {
    let mut f = [0.0; NUM_FEATURES];
    for (j, v) in f.iter_mut().enumerate() {
        *v = match j {
            FEAT_TYPE => kind.code(),
            FEAT_IS_PURE => rng.random_bool(0.5) as u8 as f64,
            FEAT_INDEGREE | FEAT_OUTDEGREE => 0.0,
            _ => rng.random_range(0.0..40.0f64).round(),
        };
    }
    f
}

/// `count` distinct families named `packer00`, `packer01`, ... with stubs of
/// two to five nodes. Families cycle through three shapes: stub reachable
/// from the entry, entry isolated beside a larger component, and no edges.
pub fn synthetic_families(count: usize, seed: u64) -> Vec<FamilySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let size = rng.random_range(2..=5usize);
            let mut nodes = vec![TemplateNode {
                kind: NodeKind::Entry,
                features: random_features(&mut rng, NodeKind::Entry),
            }];
            let mut edges = Vec::new();
            let shape = k % 3;
            for i in 1..size.max(if shape == 1 { 4 } else { 2 }) {
                let kind = match shape {
                    2 => NodeKind::Import,
                    1 if i == 1 => NodeKind::Internal,
                    _ if rng.random_bool(0.3) => NodeKind::Import,
                    _ => NodeKind::Internal,
                };
                nodes.push(TemplateNode {
                    kind,
                    features: random_features(&mut rng, kind),
                });
                let callers: Vec<usize> = (0..i)
                    .filter(|&j| nodes[j].kind != NodeKind::Import)
                    .filter(|&j| shape != 1 || j >= 1)
                    .collect();
                if shape != 2 && !callers.is_empty() {
                    let c = callers[rng.random_range(0..callers.len())];
                    edges.push((c as NodeId, i as NodeId));
                }
            }
            let decoys = if shape == 2 { 0 } else { 2 };
            let decoys = (0..decoys)
                .map(|_| {
                    (
                        random_features(&mut rng, NodeKind::Internal),
                        random_features(&mut rng, NodeKind::Internal),
                    )
                })
                .collect();
            FamilySpec {
                packer_name: format!("packer{k:02}"),
                template: Template {
                    nodes,
                    edges,
                    decoys,
                },
                perturbation: Perturbation {
                    node_add_prob: 0.1,
                    feature_noise_scale: 0.1,
                    edge_flip_prob: 0.1,
                },
                seed: rng.random(),
            }
        })
        .collect()
}

/// Labeled configuration and held-out graphs drawn from the same families.
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub config: Vec<CallGraph>,
    pub held_out: Vec<CallGraph>,
}

pub fn synthetic_split(
    families: &[FamilySpec],
    config_per_packer: usize,
    held_out_per_packer: usize,
) -> Result<SyntheticSplit> {
    let mut config = Vec::new();
    let mut held_out = Vec::new();
    for f in families {
        let mut all = generate_family(f, config_per_packer + held_out_per_packer)?;
        held_out.extend(all.split_off(config_per_packer));
        config.extend(all);
    }
    Ok(SyntheticSplit { config, held_out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackerMetrics {
    pub packer: String,
    pub tp: usize,
    pub fp: usize,
    /// Includes samples of this packer answered UNKNOWN.
    pub fn_: usize,
    pub tn: usize,
    /// Samples of this packer answered UNKNOWN.
    pub unknown: usize,
    /// `tp + fp + fn_ + tn`, the number of evaluated samples.
    pub total: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub per_packer: Vec<PackerMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_accuracy: f64,
    pub macro_fpr: f64,
    pub unknown_rate: f64,
    pub mean_inference_calls: f64,
    pub std_inference_calls: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// One-vs-rest metrics for every label that occurs as truth or verdict.
/// Ratios with a zero denominator are 0. Macro values are plain means.
pub fn evaluate(results: &[IdentificationResult], truth: &[String]) -> Result<MetricsReport> {
    if results.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} results but {} truth labels",
            results.len(),
            truth.len()
        )));
    }
    let mut labels: BTreeSet<&str> = truth.iter().map(String::as_str).collect();
    labels.extend(results.iter().filter_map(|r| r.verdict.packer()));
    let n = results.len();
    let per_packer: Vec<PackerMetrics> = labels
        .into_iter()
        .map(|p| {
            let (mut tp, mut fp, mut fn_, mut tn, mut unknown) = (0, 0, 0, 0, 0);
            for (r, t) in results.iter().zip(truth) {
                let predicted = r.verdict.packer() == Some(p);
                match (t == p, predicted) {
                    (true, true) => tp += 1,
                    (true, false) => {
                        fn_ += 1;
                        if r.verdict.is_unknown() {
                            unknown += 1;
                        }
                    }
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            PackerMetrics {
                packer: p.to_string(),
                tp,
                fp,
                fn_,
                tn,
                unknown,
                total: n,
                precision,
                recall,
                f1,
                accuracy: ratio(tp + tn, n),
                fpr: ratio(fp, fp + tn),
            }
        })
        .collect();
    let k = per_packer.len().max(1) as f64;
    let avg = |f: fn(&PackerMetrics) -> f64| per_packer.iter().map(f).sum::<f64>() / k;
    let (mean_calls, std_calls) = mean_std(results.iter().map(|r| r.inference_calls as f64));
    Ok(MetricsReport {
        samples: n,
        macro_precision: avg(|m| m.precision),
        macro_recall: avg(|m| m.recall),
        macro_f1: avg(|m| m.f1),
        macro_accuracy: avg(|m| m.accuracy),
        macro_fpr: avg(|m| m.fpr),
        unknown_rate: ratio(results.iter().filter(|r| r.verdict.is_unknown()).count(), n),
        mean_inference_calls: mean_calls,
        std_inference_calls: std_calls,
        per_packer,
    })
}

/// One benchmark row: inference calls of both strategies on one registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub samples_per_packer: usize,
    pub packers: usize,
    pub clusters: usize,
    /// `clusters + samples_per_packer`: gating selects exactly the true
    /// packer's clusters.
    pub ideal: f64,
    pub clustered_mean: f64,
    pub clustered_std: f64,
    pub flat_mean: f64,
    pub flat_std: f64,
}

pub fn bench_registry(
    reg: &Registry,
    tests: &[CallGraph],
    samples_per_packer: usize,
) -> Result<BenchRow> {
    let run = |s: &dyn IdentifyStrategy| -> Result<(f64, f64)> {
        let calls = crate::identify::identify_batch(tests, reg, s)
            .into_iter()
            .map(|r| r.map(|r| r.inference_calls as f64))
            .collect::<Result<Vec<_>>>()?;
        Ok(mean_std(calls.into_iter()))
    };
    let (clustered_mean, clustered_std) = run(&Clustered::default())?;
    let (flat_mean, flat_std) = run(&Flat)?;
    let clusters = reg.cluster_count();
    Ok(BenchRow {
        samples_per_packer,
        packers: reg.packers.len(),
        clusters,
        ideal: (clusters + samples_per_packer) as f64,
        clustered_mean,
        clustered_std,
        flat_mean,
        flat_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub packers: usize,
    pub test_per_packer: usize,
    pub seed: u64,
    pub gmn: GmnConfig,
    pub cluster: ClusterOptions,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            packers: 9,
            test_per_packer: 10,
            seed: 0,
            gmn: GmnConfig::default(),
            cluster: ClusterOptions::default(),
        }
    }
}

/// Configures one synthetic registry per entry of `samples_per_packer` and
/// benchmarks both strategies on held-out samples.
pub fn bench_scalability(cfg: &BenchConfig, samples_per_packer: &[usize]) -> Result<Vec<BenchRow>> {
    let families = synthetic_families(cfg.packers, cfg.seed);
    samples_per_packer
        .iter()
        .map(|&spp| {
            let split = synthetic_split(&families, spp, cfg.test_per_packer)?;
            let reg = configure(&split.config, &cfg.gmn, &cfg.cluster)?.registry;
            bench_registry(&reg, &split.held_out, spp)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrationMode {
    /// A classifier retrained on every known and new packer.
    Retrain,
    /// Only the new packers' samples enter the registry.
    Packhero,
}

/// Samples processed to integrate `m_new` packers of `l_samples` each into
/// a system that knows `n_known`.
pub fn integration_cost(n_known: u64, m_new: u64, l_samples: u64, mode: IntegrationMode) -> u64 {
    match mode {
        IntegrationMode::Retrain => (n_known + m_new) * l_samples,
        IntegrationMode::Packhero => m_new * l_samples,
    }
}

/// Per-packer metrics keyed by name.
pub fn by_packer(report: &MetricsReport) -> BTreeMap<&str, &PackerMetrics> {
    report
        .per_packer
        .iter()
        .map(|m| (m.packer.as_str(), m))
        .collect()
}
