use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use stubmatch::cg_model::{serialize_graph, CallGraph};
use stubmatch::identify::{identify_batch, IdentificationResult, StrategyRegistry};
use stubmatch::metrics::{
    bench_registry, bench_scalability, evaluate, synthetic_families, synthetic_split, BenchConfig,
};
use stubmatch::registry::{configure, integrate, Registry};
use stubmatch::stub_extract::extract_stub;

mod config;
mod input;
mod output;

use config::{CliConfig, FileConfig, Overrides};
use output::emit;

#[derive(Debug, Parser)]
#[command(
    name = "stubmatch",
    version,
    about = "Packer identification from unpacking-stub call graphs"
)]
struct Cli {
    /// Settings file (default: ./stubmatch.toml when present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Extract the unpacking stub of one call graph.
    Stub {
        input: PathBuf,
        /// Defaults to the input path with a `.stub.cg.json` suffix.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model and cluster a labeled dataset into a new registry.
    Configure {
        dataset: PathBuf,
        /// JSON object mapping sample_id to packer label.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Identify the packer of each input graph (files or directories).
    Identify {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add the graphs of one new packer to the registry.
    Integrate {
        dataset: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Fine-tune the model and re-cluster every packer.
        #[arg(long)]
        fine_tune: bool,
        /// Write the updated registry here instead of in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Identify a labeled test set and report precision, recall, F1 and FPR.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count inference calls of clustered and flat identification.
    Bench {
        /// Labeled test set identified against --registry.
        dataset: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Build synthetic registries instead of using --registry.
        #[arg(long)]
        synthetic: bool,
        #[arg(long, default_value_t = 9)]
        packers: usize,
        #[arg(long, value_delimiter = ',')]
        samples_per_packer: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        test_per_packer: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Registry views.
    Clusters {
        #[command(subcommand)]
        view: ClustersView,
    },
    /// Write a synthetic labeled corpus.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        packers: usize,
        #[arg(long, default_value_t = 10)]
        per_packer: usize,
        /// Extra samples per packer written to `test/`.
        #[arg(long, default_value_t = 0)]
        held_out: usize,
        /// Leave labels out of the graph files; only manifest.json has them.
        #[arg(long)]
        unlabeled: bool,
    },
}

#[derive(Debug, Subcommand)]
enum ClustersView {
    /// Per-cluster size, medoid sample and threshold.
    Inspect,
}

#[derive(Debug, clap::Args)]
struct StrategyArgs {
    /// Compare against every stored graph (same as --strategy flat).
    #[arg(long, conflicts_with = "strategy")]
    flat: bool,
    #[arg(long)]
    strategy: Option<String>,
}

impl StrategyArgs {
    fn name(&self) -> &str {
        if self.flat {
            "flat"
        } else {
            self.strategy.as_deref().unwrap_or("clustered")
        }
    }
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn load_registry(cfg: &CliConfig) -> Result<Registry> {
    let path = cfg.registry()?;
    Registry::load(path).with_context(|| format!("cannot load registry {}", path.display()))
}

fn run_identify(
    cfg: &CliConfig,
    reg: &Registry,
    files: &[PathBuf],
    graphs: &[CallGraph],
    strategy: &str,
) -> Result<Vec<IdentificationResult>> {
    let strategy = StrategyRegistry::with_builtins().create(strategy, &cfg.identify)?;
    let results = identify_batch(graphs, reg, strategy.as_ref())
        .into_iter()
        .zip(files)
        .map(|(r, f)| r.with_context(|| format!("identifying {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    Ok(results)
}

fn cmd_stub(input: &Path, out: Option<&Path>) -> Result<()> {
    let g = input::read_graph(input)?;
    let stub = extract_stub(&g)?;
    let out = match out {
        Some(p) => p.to_path_buf(),
        None => {
            let name = input.to_string_lossy();
            let base = name.strip_suffix(input::GRAPH_SUFFIX).unwrap_or(&name);
            PathBuf::from(format!("{base}.stub.cg.json"))
        }
    };
    std::fs::write(&out, stub.to_json())
        .with_context(|| format!("cannot write {}", out.display()))?;
    log::info!(
        "{}: {} of {} nodes kept ({})",
        g.sample_id(),
        stub.graph.node_count(),
        g.node_count(),
        stub.branch
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct PackerSummary {
    packer: String,
    graphs: usize,
    clusters: usize,
    flat_threshold: f64,
}

fn print_summary(cfg: &CliConfig, reg: &Registry) -> Result<()> {
    let rows: Vec<PackerSummary> = reg
        .packers
        .iter()
        .map(|(p, e)| PackerSummary {
            packer: p.clone(),
            graphs: e.graph_count(),
            clusters: e.clusters.len(),
            flat_threshold: e.flat_threshold,
        })
        .collect();
    emit(&mut std::io::stdout().lock(), cfg.format, &rows, || {
        output::Table {
            header: vec!["packer", "graphs", "clusters", "flat_threshold"],
            rows: rows
                .iter()
                .map(|r| {
                    vec![
                        r.packer.clone(),
                        r.graphs.to_string(),
                        r.clusters.to_string(),
                        format!("{:.4}", r.flat_threshold),
                    ]
                })
                .collect(),
        }
    })
}

fn cmd_configure(cfg: &CliConfig, dataset: &Path, manifest: Option<&Path>) -> Result<()> {
    let path = cfg.registry()?;
    let (_, graphs) = input::read_labeled_dir(dataset, manifest)?;
    log::info!("configuring on {} graphs", graphs.len());
    let out = configure(&graphs, &cfg.gmn, &cfg.cluster)?;
    out.registry.save(path)?;
    log::info!(
        "registry {} written to {}",
        out.registry.content_hash(),
        path.display()
    );
    print_summary(cfg, &out.registry)
}

fn cmd_integrate(
    cfg: &CliConfig,
    dataset: &Path,
    manifest: Option<&Path>,
    fine_tune: bool,
    out: Option<&Path>,
) -> Result<()> {
    let reg = load_registry(cfg)?;
    let (_, graphs) = input::read_labeled_dir(dataset, manifest)?;
    let next = integrate(&reg, &graphs, fine_tune, &cfg.gmn)?.registry;
    let dest = out.unwrap_or(cfg.registry()?);
    next.save(dest)?;
    log::info!(
        "registry {} written to {}",
        next.content_hash(),
        dest.display()
    );
    print_summary(cfg, &next)
}

fn cmd_eval(
    cfg: &CliConfig,
    dataset: &Path,
    manifest: Option<&Path>,
    strategy: &str,
    out: Option<&Path>,
) -> Result<()> {
    let reg = load_registry(cfg)?;
    let (files, graphs) = input::read_labeled_dir(dataset, manifest)?;
    let truth: Vec<String> = graphs
        .iter()
        .map(|g| g.packer_label().unwrap_or_default().to_string())
        .collect();
    let results = run_identify(cfg, &reg, &files, &graphs, strategy)?;
    let report = evaluate(&results, &truth)?;
    log::info!(
        "{} samples: macro F1 {:.4}, FPR {:.4}, unknown {:.4}, calls {:.2} ± {:.2}",
        report.samples,
        report.macro_f1,
        report.macro_fpr,
        report.unknown_rate,
        report.mean_inference_calls,
        report.std_inference_calls
    );
    emit(
        &mut *writer(out)?,
        cfg.format,
        std::slice::from_ref(&report),
        || output::metrics_table(&report),
    )
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    cfg: &CliConfig,
    dataset: Option<&Path>,
    manifest: Option<&Path>,
    synthetic: bool,
    packers: usize,
    samples_per_packer: &[usize],
    test_per_packer: usize,
    out: Option<&Path>,
) -> Result<()> {
    let rows = if synthetic {
        let spp = if samples_per_packer.is_empty() {
            vec![10]
        } else {
            samples_per_packer.to_vec()
        };
        let bench = BenchConfig {
            packers,
            test_per_packer,
            seed: cfg.gmn.seed,
            gmn: cfg.gmn.clone(),
            cluster: cfg.cluster,
        };
        bench_scalability(&bench, &spp)?
    } else {
        let Some(dataset) = dataset else {
            bail!("bench needs a test directory or --synthetic");
        };
        let reg = load_registry(cfg)?;
        let (_, graphs) = input::read_labeled_dir(dataset, manifest)?;
        let spp = match samples_per_packer {
            [] => reg.graphs.len() / reg.packers.len().max(1),
            [n] => *n,
            _ => bail!("give one --samples-per-packer value with a registry"),
        };
        vec![bench_registry(&reg, &graphs, spp)?]
    };
    emit(&mut *writer(out)?, cfg.format, &rows, || {
        output::bench_table(&rows)
    })
}

fn cmd_synth(
    seed: u64,
    out: &Path,
    packers: usize,
    per_packer: usize,
    held_out: usize,
    unlabeled: bool,
) -> Result<()> {
    let split = synthetic_split(&synthetic_families(packers, seed), per_packer, held_out)?;
    let mut manifest = BTreeMap::new();
    for (sub, graphs) in [("config", &split.config), ("test", &split.held_out)] {
        if graphs.is_empty() {
            continue;
        }
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create {}", dir.display()))?;
        for g in graphs {
            let mut g = g.clone();
            manifest.insert(
                g.sample_id().to_string(),
                g.packer_label().unwrap_or_default().to_string(),
            );
            if unlabeled {
                g.set_packer_label(None);
            }
            let path = dir.join(format!("{}{}", g.sample_id(), input::GRAPH_SUFFIX));
            std::fs::write(&path, serialize_graph(&g))
                .with_context(|| format!("cannot write {}", path.display()))?;
        }
    }
    let path = out.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    log::info!("{} samples written to {}", manifest.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = CliConfig::merge(FileConfig::load(cli.config.as_deref())?, &cli.overrides);
    env_logger::Builder::new()
        .parse_filters(&cfg.log_level)
        .format_timestamp(None)
        .try_init()
        .ok();
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()?;
    }
    match &cli.command {
        Command::Stub { input, out } => cmd_stub(input, out.as_deref()),
        Command::Configure { dataset, manifest } => {
            cmd_configure(&cfg, dataset, manifest.as_deref())
        }
        Command::Identify {
            inputs,
            strategy,
            out,
        } => {
            let reg = load_registry(&cfg)?;
            let files = input::expand_inputs(inputs)?;
            let graphs = files
                .iter()
                .map(|f| input::read_graph(f))
                .collect::<Result<Vec<_>>>()?;
            let results = run_identify(&cfg, &reg, &files, &graphs, strategy.name())?;
            emit(&mut *writer(out.as_deref())?, cfg.format, &results, || {
                output::results_table(&results)
            })
        }
        Command::Integrate {
            dataset,
            manifest,
            fine_tune,
            out,
        } => cmd_integrate(
            &cfg,
            dataset,
            manifest.as_deref(),
            *fine_tune,
            out.as_deref(),
        ),
        Command::Eval {
            dataset,
            manifest,
            strategy,
            out,
        } => cmd_eval(
            &cfg,
            dataset,
            manifest.as_deref(),
            strategy.name(),
            out.as_deref(),
        ),
        Command::Bench {
            dataset,
            manifest,
            synthetic,
            packers,
            samples_per_packer,
            test_per_packer,
            out,
        } => cmd_bench(
            &cfg,
            dataset.as_deref(),
            manifest.as_deref(),
            *synthetic,
            *packers,
            samples_per_packer,
            *test_per_packer,
            out.as_deref(),
        ),
        Command::Clusters {
            view: ClustersView::Inspect,
        } => {
            let reg = load_registry(&cfg)?;
            let rows = output::cluster_rows(&reg)?;
            emit(&mut std::io::stdout().lock(), cfg.format, &rows, || {
                output::cluster_table(&rows)
            })
        }
        Command::Synth {
            out,
            packers,
            per_packer,
            held_out,
            unlabeled,
        } => cmd_synth(
            cfg.gmn.seed,
            out,
            *packers,
            *per_packer,
            *held_out,
            *unlabeled,
        ),
    }
}

/// 3 for failures inside training or inference, 2 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let computation = e
        .chain()
        .filter_map(|c| c.downcast_ref::<stubmatch::Error>())
        .any(|c| c.is_computation());
    if computation {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn computation_errors_map_to_3() {
        let diverged = anyhow::Error::new(stubmatch::Error::Divergence {
            epoch: 1,
            batch: 0,
            loss: f64::NAN,
        });
        assert_eq!(exit_code(&diverged.context("training")), 3);
        let bad = anyhow::Error::new(stubmatch::Error::EmptyRegistry);
        assert_eq!(exit_code(&bad), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("no input graphs found")), 2);
    }
}
