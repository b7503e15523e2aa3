//! Persistent store of stub graphs, clusters, thresholds, normalization
//! statistics and model weights.
//!
//! On disk a registry is a directory:
//!
//! ```text
//! manifest.json          version, content hashes, packers, clusters, thresholds
//! model.bin              weight blob (see `gmn::params_to_blob`)
//! stats.json             feature normalization statistics
//! graphs/<id>.cg.json    stub graphs; <id> is the SHA-256 of the file bytes
//! audit.log              one JSON record per configure/integrate event
//! ```
//!
//! Saving writes a sibling temporary directory and renames it into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cg_model::{compute_feature_stats, CallGraph, FeatureStats};
use crate::cluster::{cluster_packer, Cluster, ClusterOptions};
use crate::error::{Error, Result};
use crate::gmn::{
    fine_tune, params_from_blob, params_to_blob, train, GmnConfig, GmnParams, GmnSimilarity,
    TrainLog,
};
use crate::stub_extract::{extract_stub, StubGraph};

pub const REGISTRY_VERSION: u32 = 1;

/// Existing graphs per packer mixed into fine-tuning pairs.
pub const FINE_TUNE_OLD_SAMPLE: usize = 20;

/// Label reserved for the unknown verdict.
pub const UNKNOWN_LABEL: &str = "UNKNOWN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackerEntry {
    /// Packer-wide threshold for the unclustered baseline.
    pub flat_threshold: f64,
    pub clusters: Vec<Cluster>,
}

impl PackerEntry {
    pub fn graph_count(&self) -> usize {
        self.clusters.iter().map(|c| c.member_ids.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditEvent {
    Configure,
    Integrate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: usize,
    pub event: AuditEvent,
    pub packers: Vec<String>,
    /// Number of samples the event consumed.
    pub samples: usize,
    /// `train`, `no_fine_tune` or `fine_tune`.
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    pub params: GmnParams,
    pub stats: FeatureStats,
    pub options: ClusterOptions,
    pub graphs: BTreeMap<String, StubGraph>,
    pub packers: BTreeMap<String, PackerEntry>,
    pub audit: Vec<AuditRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    model_sha256: String,
    stats_sha256: String,
    audit_sha256: String,
    clustering: ClusterOptions,
    graphs: Vec<String>,
    packers: BTreeMap<String, PackerEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content address of a stub graph.
pub fn graph_id(g: &StubGraph) -> String {
    sha256_hex(g.to_json().as_bytes())
}

fn corrupt(id: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Corruption {
        id: id.into(),
        reason: reason.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

impl Registry {
    pub fn clusters(&self) -> impl Iterator<Item = &Cluster> {
        self.packers.values().flat_map(|p| p.clusters.iter())
    }

    pub fn cluster_count(&self) -> usize {
        self.clusters().count()
    }

    pub fn graph(&self, id: &str) -> Result<&StubGraph> {
        self.graphs
            .get(id)
            .ok_or_else(|| Error::integrity(format!("graph {id} is not stored")))
    }

    pub fn similarity(&self) -> GmnSimilarity<'_> {
        GmnSimilarity {
            params: &self.params,
            stats: &self.stats,
        }
    }

    /// Every id resolves, labels match their packer key, clusters
    /// partition the stored graphs.
    pub fn check_integrity(&self) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (packer, entry) in &self.packers {
            for c in &entry.clusters {
                if &c.packer != packer {
                    return Err(Error::integrity(format!(
                        "cluster of `{}` filed under `{packer}`",
                        c.packer
                    )));
                }
                if !c.member_ids.contains(&c.medoid_id) {
                    return Err(Error::integrity(format!(
                        "medoid {} is not a member of its cluster",
                        c.medoid_id
                    )));
                }
                for id in &c.member_ids {
                    let g = self.graph(id)?;
                    if g.packer_label() != Some(packer.as_str()) {
                        return Err(Error::integrity(format!(
                            "graph {id} is labeled {:?} but clustered under `{packer}`",
                            g.packer_label()
                        )));
                    }
                    if seen.insert(id.clone(), ()).is_some() {
                        return Err(Error::integrity(format!("graph {id} is in two clusters")));
                    }
                }
            }
        }
        if seen.len() != self.graphs.len() {
            return Err(Error::integrity("stored graphs not covered by clusters"));
        }
        Ok(())
    }

    fn manifest_and_files(&self) -> (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>) {
        let model = params_to_blob(&self.params);
        let stats = serde_json::to_vec_pretty(&self.stats).expect("stats serialize");
        let mut audit = Vec::new();
        for rec in &self.audit {
            audit.extend(serde_json::to_vec(rec).expect("audit serializes"));
            audit.push(b'\n');
        }
        let manifest = Manifest {
            version: REGISTRY_VERSION,
            model_sha256: sha256_hex(&model),
            stats_sha256: sha256_hex(&stats),
            audit_sha256: sha256_hex(&audit),
            clustering: self.options,
            graphs: self.graphs.keys().cloned().collect(),
            packers: self.packers.clone(),
        };
        let manifest = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        (manifest, model, stats, audit)
    }

    /// SHA-256 of the manifest, which pins every other file by hash.
    pub fn content_hash(&self) -> String {
        sha256_hex(&self.manifest_and_files().0)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let name = path
            .file_name()
            .ok_or_else(|| Error::invalid(format!("bad registry path {}", path.display())))?
            .to_string_lossy()
            .into_owned();
        let parent = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let parent = if parent.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            parent
        };
        let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        let graphs_dir = tmp.join("graphs");
        fs::create_dir_all(&graphs_dir).map_err(|e| Error::io(&graphs_dir, e))?;

        let (manifest, model, stats, audit) = self.manifest_and_files();
        write(&tmp.join("model.bin"), &model)?;
        write(&tmp.join("stats.json"), &stats)?;
        write(&tmp.join("audit.log"), &audit)?;
        for (id, g) in &self.graphs {
            write(
                &graphs_dir.join(format!("{id}.cg.json")),
                g.to_json().as_bytes(),
            )?;
        }
        write(&tmp.join("manifest.json"), &manifest)?;

        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        let had_old = path.exists();
        if had_old {
            fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
        }
        if let Err(e) = fs::rename(&tmp, path) {
            if had_old {
                let _ = fs::rename(&old, path);
            }
            return Err(Error::io(path, e));
        }
        if had_old {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Registry> {
        let path = path.as_ref();
        let manifest_bytes = read(&path.join("manifest.json"))?;
        let manifest: Manifest = match serde_json::from_slice::<serde_json::Value>(&manifest_bytes)
        {
            Ok(v) => {
                let found = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
                if found != REGISTRY_VERSION {
                    return Err(Error::Version {
                        found,
                        expected: REGISTRY_VERSION,
                    });
                }
                serde_json::from_value(v).map_err(|e| corrupt("manifest.json", e.to_string()))?
            }
            Err(e) => return Err(corrupt("manifest.json", e.to_string())),
        };

        let model = read(&path.join("model.bin"))?;
        if sha256_hex(&model) != manifest.model_sha256 {
            return Err(corrupt("model.bin", "hash does not match manifest"));
        }
        let params = params_from_blob(&model)?;

        let stats_bytes = read(&path.join("stats.json"))?;
        if sha256_hex(&stats_bytes) != manifest.stats_sha256 {
            return Err(corrupt("stats.json", "hash does not match manifest"));
        }
        let stats: FeatureStats = serde_json::from_slice(&stats_bytes)
            .map_err(|e| corrupt("stats.json", e.to_string()))?;
        stats.validate()?;

        let audit_bytes = read(&path.join("audit.log"))?;
        if sha256_hex(&audit_bytes) != manifest.audit_sha256 {
            return Err(corrupt("audit.log", "hash does not match manifest"));
        }
        let audit = audit_bytes
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(|l| serde_json::from_slice(l).map_err(|e| corrupt("audit.log", e.to_string())))
            .collect::<Result<Vec<AuditRecord>>>()?;

        let mut graphs = BTreeMap::new();
        for id in &manifest.graphs {
            let file = path.join("graphs").join(format!("{id}.cg.json"));
            let bytes = fs::read(&file).map_err(|e| corrupt(id.clone(), e.to_string()))?;
            if &sha256_hex(&bytes) != id {
                return Err(corrupt(id.clone(), "content hash mismatch"));
            }
            let text = String::from_utf8(bytes).map_err(|e| corrupt(id.clone(), e.to_string()))?;
            let g = StubGraph::from_json(&text).map_err(|e| corrupt(id.clone(), e.to_string()))?;
            graphs.insert(id.clone(), g);
        }

        let reg = Registry {
            params,
            stats,
            options: manifest.clustering,
            graphs,
            packers: manifest.packers,
            audit,
        };
        reg.check_integrity()?;
        Ok(reg)
    }
}

fn label_of(g: &CallGraph) -> Result<&str> {
    let l = g
        .packer_label()
        .ok_or_else(|| Error::invalid(format!("sample `{}` has no packer label", g.sample_id())))?;
    if l == UNKNOWN_LABEL || l.is_empty() {
        return Err(Error::invalid(format!("`{l}` is not a valid packer label")));
    }
    Ok(l)
}

/// Extracts stubs and assigns content ids, rejecting duplicates.
fn stubs_with_ids(dataset: &[CallGraph]) -> Result<Vec<(String, StubGraph)>> {
    let mut out: Vec<(String, StubGraph)> = Vec::with_capacity(dataset.len());
    let mut seen = std::collections::BTreeSet::new();
    for g in dataset {
        label_of(g)?;
        let stub = extract_stub(g)?;
        let id = graph_id(&stub);
        if !seen.insert(id.clone()) {
            return Err(Error::invalid(format!(
                "sample `{}` duplicates another sample",
                g.sample_id()
            )));
        }
        out.push((id, stub));
    }
    Ok(out)
}

fn group_ids(graphs: &BTreeMap<String, StubGraph>) -> BTreeMap<String, Vec<String>> {
    let mut by_packer: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, g) in graphs {
        let label = g.packer_label().expect("stored graphs are labeled");
        by_packer
            .entry(label.to_string())
            .or_default()
            .push(id.clone());
    }
    by_packer
}

fn cluster_one(
    params: &GmnParams,
    stats: &FeatureStats,
    options: &ClusterOptions,
    graphs: &BTreeMap<String, StubGraph>,
    ids: &[String],
) -> Result<PackerEntry> {
    let members: Vec<StubGraph> = ids.iter().map(|id| graphs[id].clone()).collect();
    let sim = GmnSimilarity { params, stats };
    let result = cluster_packer(&members, ids, &sim, options)?;
    Ok(PackerEntry {
        flat_threshold: result.flat_threshold,
        clusters: result.clusters,
    })
}

/// Result of [`configure`].
#[derive(Debug, Clone)]
pub struct Configured {
    pub registry: Registry,
    pub train_log: TrainLog,
}

/// Builds a registry from labeled full call graphs: stub extraction,
/// normalization statistics, network training and per-packer clustering.
pub fn configure(
    dataset: &[CallGraph],
    config: &GmnConfig,
    options: &ClusterOptions,
) -> Result<Configured> {
    config.validate()?;
    let stubs = stubs_with_ids(dataset)?;
    let packer_set: std::collections::BTreeSet<&str> =
        stubs.iter().filter_map(|(_, s)| s.packer_label()).collect();
    if packer_set.len() < 2 {
        return Err(Error::invalid(
            "configuration needs graphs of at least two packers",
        ));
    }
    let stats = compute_feature_stats(stubs.iter().map(|(_, s)| &s.graph))?;
    let train_set: Vec<StubGraph> = stubs.iter().map(|(_, s)| s.clone()).collect();
    let (params, train_log) = train(&train_set, config, &stats)?;
    log::info!(
        "trained on {} graphs, final loss {:.4}",
        train_set.len(),
        train_log.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );

    let graphs: BTreeMap<String, StubGraph> = stubs.into_iter().collect();
    let mut packers = BTreeMap::new();
    for (packer, ids) in group_ids(&graphs) {
        let entry = cluster_one(&params, &stats, options, &graphs, &ids)?;
        packers.insert(packer, entry);
    }
    let registry = Registry {
        params,
        stats,
        options: *options,
        audit: vec![AuditRecord {
            seq: 1,
            event: AuditEvent::Configure,
            packers: packers.keys().cloned().collect(),
            samples: graphs.len(),
            mode: "train".into(),
        }],
        graphs,
        packers,
    };
    registry.check_integrity()?;
    Ok(Configured {
        registry,
        train_log,
    })
}

/// Result of [`integrate`].
#[derive(Debug, Clone)]
pub struct Integrated {
    pub registry: Registry,
    /// Present when the model was fine-tuned.
    pub train_log: Option<TrainLog>,
}

/// Adds one packer's graphs to a registry.
///
/// Without fine-tuning the model is untouched: only the affected packer is
/// clustered and every other cluster stays byte-identical. With fine-tuning
/// the model is tuned on the new graphs plus up to [`FINE_TUNE_OLD_SAMPLE`]
/// stored graphs of every other packer, then every packer is re-clustered.
/// `tune` supplies fine-tuning epochs, learning rate, batch size and seed.
pub fn integrate(
    reg: &Registry,
    new_graphs: &[CallGraph],
    fine_tune_model: bool,
    tune: &GmnConfig,
) -> Result<Integrated> {
    if new_graphs.is_empty() {
        return Err(Error::invalid("nothing to integrate"));
    }
    let label = label_of(&new_graphs[0])?.to_string();
    for g in new_graphs {
        if label_of(g)? != label {
            return Err(Error::invalid(
                "integrated graphs must share one packer label",
            ));
        }
    }
    let stubs = stubs_with_ids(new_graphs)?;
    if let Some((id, _)) = stubs.iter().find(|(id, _)| reg.graphs.contains_key(id)) {
        return Err(Error::invalid(format!("graph {id} is already stored")));
    }

    let mut next = reg.clone();
    let new_stubs: Vec<StubGraph> = stubs.iter().map(|(_, s)| s.clone()).collect();
    next.graphs.extend(stubs);
    let by_packer = group_ids(&next.graphs);

    let mut train_log = None;
    if fine_tune_model {
        let mut rng = ChaCha8Rng::seed_from_u64(tune.seed);
        let mut anchor = new_stubs;
        let mut old_sample = Vec::new();
        for (packer, ids) in group_ids(&reg.graphs) {
            let graphs = ids.iter().map(|id| reg.graphs[id].clone());
            if packer == label {
                anchor.extend(graphs);
            } else {
                let mut all: Vec<StubGraph> = graphs.collect();
                all.shuffle(&mut rng);
                all.truncate(FINE_TUNE_OLD_SAMPLE);
                old_sample.extend(all);
            }
        }
        let (params, log) = fine_tune(&reg.params, &anchor, &old_sample, tune, &reg.stats)?;
        next.params = params;
        train_log = Some(log);
        next.packers.clear();
        for (packer, ids) in &by_packer {
            let entry = cluster_one(&next.params, &next.stats, &next.options, &next.graphs, ids)?;
            next.packers.insert(packer.clone(), entry);
        }
    } else {
        let entry = cluster_one(
            &next.params,
            &next.stats,
            &next.options,
            &next.graphs,
            &by_packer[&label],
        )?;
        next.packers.insert(label.clone(), entry);
    }

    next.audit.push(AuditRecord {
        seq: reg.audit.len() + 1,
        event: AuditEvent::Integrate,
        packers: vec![label],
        samples: new_graphs.len(),
        mode: if fine_tune_model {
            "fine_tune"
        } else {
            "no_fine_tune"
        }
        .into(),
    });
    next.check_integrity()?;
    Ok(Integrated {
        registry: next,
        train_log,
    })
}
