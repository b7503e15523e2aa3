//! Packer identification against a registry.
//!
//! Strategies implement [`IdentifyStrategy`] and are looked up by name in a
//! [`StrategyRegistry`]. Two ship built in: `clustered` (medoid gating, then
//! per-cluster thresholds) and `flat` (every stored graph, per-packer
//! thresholds).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cg_model::CallGraph;
use crate::error::{Error, Result};
use crate::gmn::Similarity;
use crate::registry::{Registry, UNKNOWN_LABEL};
use crate::stub_extract::{extract_stub, StubBranch, StubGraph};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Verdict {
    Packer(String),
    Unknown,
}

impl Verdict {
    pub fn as_str(&self) -> &str {
        match self {
            Verdict::Packer(p) => p,
            Verdict::Unknown => UNKNOWN_LABEL,
        }
    }

    pub fn packer(&self) -> Option<&str> {
        match self {
            Verdict::Packer(p) => Some(p),
            Verdict::Unknown => None,
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, Verdict::Unknown)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for Verdict {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Verdict {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(if s == UNKNOWN_LABEL {
            Verdict::Unknown
        } else {
            Verdict::Packer(s)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedCluster {
    pub packer: String,
    /// Position in the packer's cluster list.
    pub cluster: usize,
    pub medoid_similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationResult {
    pub sample_id: String,
    pub verdict: Verdict,
    pub score: f64,
    pub per_packer_scores: BTreeMap<String, f64>,
    pub selected_clusters: Vec<SelectedCluster>,
    pub inference_calls: usize,
    pub stub_branch: StubBranch,
}

/// Threshold-passing tally of one packer over the graphs it was compared on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub packer: String,
    /// Graphs compared (the packer's selected cluster sizes, summed).
    pub compared: usize,
    pub passes: usize,
}

/// Score of every candidate: its passes over the largest `compared` among
/// all candidates. The verdict is the best score, ties going to the higher
/// pass count and then the smaller name. No candidates, or a best score of
/// zero with `unknown_on_zero_score`, gives [`Verdict::Unknown`].
pub fn score_candidates(
    candidates: &[Candidate],
    unknown_on_zero_score: bool,
) -> (Verdict, f64, BTreeMap<String, f64>) {
    let denom = candidates.iter().map(|c| c.compared).max().unwrap_or(0);
    let scores: BTreeMap<String, f64> = candidates
        .iter()
        .map(|c| {
            let s = if denom == 0 {
                0.0
            } else {
                c.passes as f64 / denom as f64
            };
            (c.packer.clone(), s)
        })
        .collect();
    // The denominator is shared, so ordering by passes orders by score.
    let best = candidates
        .iter()
        .max_by(|x, y| x.passes.cmp(&y.passes).then(y.packer.cmp(&x.packer)));
    match best {
        None => (Verdict::Unknown, 0.0, scores),
        Some(c) => {
            let s = scores[&c.packer];
            if s == 0.0 && unknown_on_zero_score {
                (Verdict::Unknown, 0.0, scores)
            } else {
                (Verdict::Packer(c.packer.clone()), s, scores)
            }
        }
    }
}

/// Wraps a similarity and counts how often it is called.
pub struct CountingSimilarity<'a> {
    inner: &'a dyn Similarity,
    calls: AtomicUsize,
}

impl<'a> CountingSimilarity<'a> {
    pub fn new(inner: &'a dyn Similarity) -> Self {
        CountingSimilarity {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Similarity for CountingSimilarity<'_> {
    fn similarity(&self, a: &StubGraph, b: &StubGraph) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.similarity(a, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentifyOptions {
    /// Report UNKNOWN when no compared graph passed its threshold.
    pub unknown_on_zero_score: bool,
}

impl Default for IdentifyOptions {
    fn default() -> Self {
        IdentifyOptions {
            unknown_on_zero_score: true,
        }
    }
}

pub trait IdentifyStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Identifies an already extracted stub. `sim` is the only source of
    /// similarities, so a counting wrapper sees every inference.
    fn identify_stub(
        &self,
        stub: &StubGraph,
        reg: &Registry,
        sim: &dyn Similarity,
    ) -> Result<IdentificationResult>;

    fn identify(&self, g: &CallGraph, reg: &Registry) -> Result<IdentificationResult> {
        let stub = extract_stub(g)?;
        self.identify_stub(&stub, reg, &reg.similarity())
    }
}

fn nonempty(reg: &Registry) -> Result<()> {
    if reg.graphs.is_empty() || reg.packers.is_empty() {
        Err(Error::EmptyRegistry)
    } else {
        Ok(())
    }
}

/// Medoid gating followed by per-cluster threshold counting.
#[derive(Debug, Clone, Copy, Default)]
pub struct Clustered {
    pub options: IdentifyOptions,
}

impl IdentifyStrategy for Clustered {
    fn name(&self) -> &'static str {
        "clustered"
    }

    fn identify_stub(
        &self,
        stub: &StubGraph,
        reg: &Registry,
        sim: &dyn Similarity,
    ) -> Result<IdentificationResult> {
        nonempty(reg)?;
        let counter = CountingSimilarity::new(sim);
        let mut selected = Vec::new();
        for (packer, entry) in &reg.packers {
            for (i, c) in entry.clusters.iter().enumerate() {
                let s = counter.similarity(stub, reg.graph(&c.medoid_id)?)?;
                if s > 0.0 {
                    selected.push(SelectedCluster {
                        packer: packer.clone(),
                        cluster: i,
                        medoid_similarity: s,
                    });
                }
            }
        }

        let mut tally: BTreeMap<&str, Candidate> = BTreeMap::new();
        for sel in &selected {
            let c = &reg.packers[&sel.packer].clusters[sel.cluster];
            let mut passes = 0;
            for id in &c.member_ids {
                if counter.similarity(stub, reg.graph(id)?)? >= c.threshold {
                    passes += 1;
                }
            }
            let t = tally.entry(&sel.packer).or_insert_with(|| Candidate {
                packer: sel.packer.clone(),
                compared: 0,
                passes: 0,
            });
            t.compared += c.member_ids.len();
            t.passes += passes;
        }
        let candidates: Vec<Candidate> = tally.into_values().collect();
        let (verdict, score, per_packer_scores) =
            score_candidates(&candidates, self.options.unknown_on_zero_score);
        Ok(IdentificationResult {
            sample_id: stub.sample_id().to_string(),
            verdict,
            score,
            per_packer_scores,
            selected_clusters: selected,
            inference_calls: counter.calls(),
            stub_branch: stub.branch,
        })
    }
}

/// Compares against every stored graph with per-packer thresholds.
///
/// Never answers UNKNOWN. If no graph passes its threshold the verdict is
/// the packer of the most similar stored graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct Flat;

impl IdentifyStrategy for Flat {
    fn name(&self) -> &'static str {
        "flat"
    }

    fn identify_stub(
        &self,
        stub: &StubGraph,
        reg: &Registry,
        sim: &dyn Similarity,
    ) -> Result<IdentificationResult> {
        nonempty(reg)?;
        let counter = CountingSimilarity::new(sim);
        let mut candidates = Vec::with_capacity(reg.packers.len());
        let mut nearest: Option<(f64, &str)> = None;
        for (packer, entry) in &reg.packers {
            let mut passes = 0;
            let mut compared = 0;
            for c in &entry.clusters {
                for id in &c.member_ids {
                    let s = counter.similarity(stub, reg.graph(id)?)?;
                    compared += 1;
                    if s >= entry.flat_threshold {
                        passes += 1;
                    }
                    if nearest.is_none_or(|(best, _)| s > best) {
                        nearest = Some((s, packer));
                    }
                }
            }
            candidates.push(Candidate {
                packer: packer.clone(),
                compared,
                passes,
            });
        }
        let (mut verdict, score, per_packer_scores) = score_candidates(&candidates, false);
        if score == 0.0 {
            if let Some((_, p)) = nearest {
                verdict = Verdict::Packer(p.to_string());
            }
        }
        Ok(IdentificationResult {
            sample_id: stub.sample_id().to_string(),
            verdict,
            score,
            per_packer_scores,
            selected_clusters: Vec::new(),
            inference_calls: counter.calls(),
            stub_branch: stub.branch,
        })
    }
}

pub type StrategyCtor = fn(&IdentifyOptions) -> Box<dyn IdentifyStrategy>;

/// Name-keyed constructors of identification strategies.
pub struct StrategyRegistry {
    ctors: BTreeMap<&'static str, StrategyCtor>,
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry {
            ctors: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("clustered", |o| Box::new(Clustered { options: *o }));
        r.register("flat", |_| Box::new(Flat));
        r
    }

    /// Registers `ctor` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &'static str, ctor: StrategyCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn create(
        &self,
        name: &str,
        options: &IdentifyOptions,
    ) -> Result<Box<dyn IdentifyStrategy>> {
        self.ctors
            .get(name)
            .map(|ctor| ctor(options))
            .ok_or_else(|| Error::UnknownStrategy {
                kind: "identification strategy",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ctors.keys().copied()
    }
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

/// Clustered identification with default options.
pub fn identify(g: &CallGraph, reg: &Registry) -> Result<IdentificationResult> {
    Clustered::default().identify(g, reg)
}

pub fn identify_flat(g: &CallGraph, reg: &Registry) -> Result<IdentificationResult> {
    Flat.identify(g, reg)
}

/// Identifies every input in parallel. Results keep input order; a failed
/// item does not stop the others.
pub fn identify_batch(
    gs: &[CallGraph],
    reg: &Registry,
    strategy: &dyn IdentifyStrategy,
) -> Vec<Result<IdentificationResult>> {
    gs.par_iter().map(|g| strategy.identify(g, reg)).collect()
}
