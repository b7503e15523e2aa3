//! Reading call graphs and label manifests from disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stubmatch::cg_model::{parse_graph, CallGraph};

pub const GRAPH_SUFFIX: &str = ".cg.json";
const STUB_SUFFIX: &str = ".stub.cg.json";

pub fn read_graph(path: &Path) -> Result<CallGraph> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    parse_graph(&text).with_context(|| format!("in {}", path.display()))
}

/// Graph documents in `dir`, sorted by file name. Stub documents are skipped.
pub fn graph_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if path.is_file() && name.ends_with(GRAPH_SUFFIX) && !name.ends_with(STUB_SUFFIX) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Files given directly plus the graph files of any directories.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(graph_files(p)?);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no input graphs found");
    }
    Ok(out)
}

/// `sample_id -> packer label` map from a JSON object.
pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))
}

/// Loads every graph of `dir`, labelling them from `manifest` when given.
/// Each graph must end up with a label. Returns the files alongside.
pub fn read_labeled_dir(
    dir: &Path,
    manifest: Option<&Path>,
) -> Result<(Vec<PathBuf>, Vec<CallGraph>)> {
    let labels = manifest.map(read_manifest).transpose()?;
    let files = graph_files(dir)?;
    if files.is_empty() {
        bail!("no {GRAPH_SUFFIX} files in {}", dir.display());
    }
    let mut graphs = Vec::with_capacity(files.len());
    for f in &files {
        let mut g = read_graph(f)?;
        if let Some(label) = labels.as_ref().and_then(|m| m.get(g.sample_id())) {
            g.set_packer_label(Some(label.clone()));
        }
        if g.packer_label().is_none() {
            bail!(
                "sample `{}` ({}) has no packer label",
                g.sample_id(),
                f.display()
            );
        }
        graphs.push(g);
    }
    Ok((files, graphs))
}
