//! Acceptance suite. Criteria run one after another, each timed on its own,
//! and print a single PASS or FAIL line. The process fails if any does.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use stubmatch::cg_model::{FeatureStats, NodeId};
use stubmatch::cluster::*;
use stubmatch::gmn::*;
use stubmatch::identify::*;
use stubmatch::metrics::*;
use stubmatch::registry::{configure, integrate, Registry};
use stubmatch::stub_extract::{connected_components, extract_stub, StubBranch};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn run(n: usize, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let took = t.elapsed();
    let outcome = match outcome {
        Ok(_) if took > limit => Err(format!("took {took:.1?}, limit {limit:?}")),
        o => o,
    };
    let ok = outcome.is_ok();
    let detail = outcome.unwrap_or_else(|e| e);
    println!(
        "criterion {n}: {} ({detail}) [{:.1}s]",
        if ok { "PASS" } else { "FAIL" },
        took.as_secs_f64()
    );
    ok
}

fn wide_stats() -> FeatureStats {
    FeatureStats {
        mean: [10.0; 12],
        std: [8.0; 12],
        computed_over: 1,
    }
}

fn criterion_1() -> Outcome {
    let branches: BTreeSet<StubBranch> = [
        "upx_like_small.cg.json",
        "entry_component.cg.json",
        "second_component.cg.json",
    ]
    .iter()
    .map(|f| extract_stub(&fixture(f)).unwrap().branch)
    .collect();
    ensure!(branches.len() == 3, "fixtures cover {branches:?}");
    let mut r = rng(1001);
    let mut seen = BTreeSet::new();
    for i in 0..200 {
        let n = r.random_range(1..=40);
        let p = r.random_range(0.0..0.08);
        let e = r.random_range(1..3);
        let g = random_graph(&mut r, n, p, e);
        let comps: BTreeSet<BTreeSet<NodeId>> = connected_components(&g)
            .into_iter()
            .map(|c| c.into_iter().collect())
            .collect();
        ensure!(
            comps == components_oracle(&g),
            "components differ on graph {i}"
        );
        let s = extract_stub(&g).unwrap();
        ensure!(
            s.graph.node_ids().collect::<BTreeSet<_>>() == stub_oracle(&g),
            "stub differs on graph {i}"
        );
        seen.insert(s.branch);
    }
    Ok(format!(
        "200 graphs exact, random graphs hit {} branches",
        seen.len()
    ))
}

fn criterion_2() -> Outcome {
    let params = GmnParams::init(&GmnConfig {
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let margin = params.config.margin;
    let stats = wide_stats();
    let mut r = rng(1002);
    let mut worst = 0.0f64;
    let mut worst_own = 0.0f64;
    let mut probes = 0;
    let mut pairs = 0;
    while pairs < 20 {
        let (na, nb) = (r.random_range(2..8), r.random_range(2..8));
        let ga = random_graph(&mut r, na, 0.2, 1);
        let gb = random_graph(&mut r, nb, 0.2, 1);
        let (a, b) = (
            GraphInput::new(&ga, &stats).unwrap(),
            GraphInput::new(&gb, &stats).unwrap(),
        );
        let (ea, eb) = params.embed_inputs(&a, &b).unwrap();
        let s = cosine_similarity(&ea, &eb).unwrap();
        // A smooth point has positive loss away from the hinge.
        let label = if s < margin - 0.01 { 1.0 } else { -1.0 };
        if label * s > margin - 0.01 {
            continue;
        }
        pairs += 1;
        let opts = GradCheckOptions {
            seed: pairs,
            fraction: 0.005,
            ..Default::default()
        };
        let report = gradient_check(&params, &a, &b, label, opts).unwrap();
        ensure!(
            report.loss > 0.0 && !report.analytic_is_zero,
            "pair {pairs} is not a smooth point"
        );
        worst = worst.max(report.max_relative_error);
        probes += report.probes.len();

        // Second route: finite differences of the public forward pass.
        let loss = |p: &GmnParams| {
            let (x, y) = p.embed_inputs(&a, &b).unwrap();
            pair_loss(cosine_similarity(&x, &y).unwrap(), label, margin)
        };
        for &(idx, analytic, _) in report.probes.iter().step_by(20) {
            let mut p = params.clone();
            let (t, off) = locate(&p, idx);
            let x = p.tensors()[t][off];
            p.tensors_mut()[t][off] = x + opts.epsilon;
            let up = loss(&p);
            p.tensors_mut()[t][off] = x - opts.epsilon;
            let down = loss(&p);
            let fd = (up - down) / (2.0 * opts.epsilon);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(opts.floor);
            worst_own = worst_own.max(rel);
        }
    }
    ensure!(worst < 1e-4, "max relative error {worst:.3e}");
    ensure!(
        worst_own < 1e-4,
        "independent finite differences disagree by {worst_own:.3e}"
    );
    Ok(format!(
        "20 pairs, {probes} probes, max rel err {worst:.2e}, independent {worst_own:.2e}"
    ))
}

fn locate(p: &GmnParams, mut idx: usize) -> (usize, usize) {
    for (t, s) in p.tensors().iter().enumerate() {
        if idx < s.len() {
            return (t, idx);
        }
        idx -= s.len();
    }
    panic!("index out of range")
}

fn criterion_3() -> Outcome {
    let params = GmnParams::init(&GmnConfig {
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let stats = wide_stats();
    let mut r = rng(1003);
    let mut relabel_err = 0.0f64;
    for _ in 0..1000 {
        let (na, nb) = (r.random_range(1..12), r.random_range(1..12));
        let ga = random_graph(&mut r, na, 0.15, 1);
        let gb = random_graph(&mut r, nb, 0.15, 1);
        let (a, b) = (
            GraphInput::new(&ga, &stats).unwrap(),
            GraphInput::new(&gb, &stats).unwrap(),
        );
        let (ea, eb) = params.embed_inputs(&a, &b).unwrap();
        let (fb, fa) = params.embed_inputs(&b, &a).unwrap();
        ensure!(
            ea == fa && eb == fb,
            "swapping inputs changed the embeddings"
        );
        let c = cosine_similarity(&ea, &eb).unwrap();
        ensure!((-1.0..=1.0).contains(&c), "cosine {c} out of range");
    }
    for _ in 0..50 {
        let n = r.random_range(2..12);
        let ga = random_graph(&mut r, n, 0.15, 2);
        let gb = random_graph(&mut r, 6, 0.15, 1);
        let mut perm: Vec<NodeId> = (0..n).collect();
        perm.shuffle(&mut r);
        let gp = relabel(&ga, &perm);
        let b = GraphInput::new(&gb, &stats).unwrap();
        let (ea, eb) = params
            .embed_inputs(&GraphInput::new(&ga, &stats).unwrap(), &b)
            .unwrap();
        let (ep, eq) = params
            .embed_inputs(&GraphInput::new(&gp, &stats).unwrap(), &b)
            .unwrap();
        for (x, y) in ea
            .as_slice()
            .iter()
            .zip(ep.as_slice())
            .chain(eb.as_slice().iter().zip(eq.as_slice()))
        {
            relabel_err = relabel_err.max((x - y).abs() / x.abs().max(1.0));
        }
    }
    ensure!(
        relabel_err <= 1e-9,
        "relabeling moved an embedding by {relabel_err:.3e}"
    );
    Ok(format!(
        "1000 pairs symmetric and in range, relabel err {relabel_err:.1e}"
    ))
}

fn criterion_4() -> Outcome {
    let mut r = rng(1004);
    for i in 0..50 {
        let d = random_distances(&mut r, 10);
        let all: Vec<usize> = (0..10).collect();
        ensure!(
            medoid(&d, &all).unwrap() == medoid_exhaustive(&d, &all),
            "medoid differs on matrix {i}"
        );
    }
    for n in [2, 5, 10, 30] {
        for _ in 0..10 {
            let d = random_distances(&mut r, n);
            let dendro = single_linkage_dendrogram(&d);
            for (m, w) in dendro.merges.iter().zip(mst_weights(&d)) {
                ensure!(
                    (m.height - w).abs() < 1e-9,
                    "merge height {} vs {w}",
                    m.height
                );
            }
            for k in 2..n.min(8) {
                let labels = dendro.cut(k);
                let got = silhouette_score(&d, &labels).unwrap();
                let want = silhouette_direct(&d, &labels);
                ensure!((got - want).abs() < 1e-9, "silhouette {got} vs {want}");
            }
        }
    }
    // Unicity on clusters produced for several packers at once.
    let mut total = 0;
    for p in 0..4 {
        let packer = format!("p{p}");
        let ids = names(&format!("{packer}_"), 9);
        let graphs: Vec<_> = ids.iter().map(|i| tiny_stub(i, Some(&packer))).collect();
        let mut sim = TableSimilarity::new(0.0);
        for i in 0..9 {
            for j in i + 1..9 {
                sim.set(&ids[i], &ids[j], r.random_range(-1.0..1.0));
            }
        }
        let out = cluster_packer(&graphs, &ids, &sim, &ClusterOptions::default()).unwrap();
        let members: Vec<&String> = out.clusters.iter().flat_map(|c| &c.member_ids).collect();
        ensure!(
            members.len() == 9 && members.iter().collect::<BTreeSet<_>>().len() == 9,
            "not a partition"
        );
        for c in &out.clusters {
            ensure!(
                c.packer == packer,
                "cluster of {packer} labeled {}",
                c.packer
            );
            ensure!(
                c.member_ids
                    .iter()
                    .all(|m| m.starts_with(&format!("{packer}_"))),
                "foreign member"
            );
        }
        total += out.clusters.len();
    }
    Ok(format!(
        "medoid, merge heights and silhouette exact; {total} clusters packer-pure"
    ))
}

fn criterion_5() -> Outcome {
    let split = synthetic_split(&synthetic_families(5, 0), 10, 50).unwrap();
    let reg = configure(
        &split.config,
        &GmnConfig::default(),
        &ClusterOptions::default(),
    )
    .unwrap()
    .registry;
    let results: Vec<_> = identify_batch(&split.held_out, &reg, &Clustered::default())
        .into_iter()
        .collect::<Result<_, _>>()
        .unwrap();
    let truth: Vec<String> = split
        .held_out
        .iter()
        .map(|g| g.packer_label().unwrap().to_string())
        .collect();
    let m = evaluate(&results, &truth).unwrap();
    let summary = format!(
        "macro F1 {:.3}, FPR {:.3}, unknown {:.3}, {} clusters",
        m.macro_f1,
        m.macro_fpr,
        m.unknown_rate,
        reg.cluster_count()
    );
    ensure!(m.macro_f1 >= 0.95, "{summary}");
    ensure!(m.macro_fpr <= 0.02, "{summary}");
    ensure!(m.unknown_rate <= 0.05, "{summary}");
    Ok(summary)
}

fn criterion_6() -> Outcome {
    let spp = 10;
    let mut rows = Vec::new();
    for packers in [5, 10] {
        let cfg = BenchConfig {
            packers,
            ..Default::default()
        };
        rows.push(bench_scalability(&cfg, &[spp]).unwrap().remove(0));
    }
    for row in &rows {
        let exact = (row.packers * spp) as f64;
        ensure!(
            row.flat_mean == exact && row.flat_std == 0.0,
            "flat {:.2} ± {:.2}, want {exact:.2} ± 0.00",
            row.flat_mean,
            row.flat_std
        );
        ensure!(
            row.clustered_mean <= 1.25 * row.ideal,
            "{} packers: clustered {:.2} above 1.25 × ideal {:.2}",
            row.packers,
            row.clustered_mean,
            row.ideal
        );
    }
    // Member comparisons beyond the medoid probes should not grow with the
    // number of packers.
    let excess: Vec<f64> = rows
        .iter()
        .map(|r| r.clustered_mean - r.clusters as f64)
        .collect();
    ensure!(
        (excess[1] - excess[0]).abs() <= 0.25 * spp as f64,
        "member comparisons {:.2} at 5 packers vs {:.2} at 10",
        excess[0],
        excess[1]
    );
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "{} packers: flat {:.2} ± {:.2}, clustered {:.2} ± {:.2}, ideal {:.0}",
                r.packers, r.flat_mean, r.flat_std, r.clustered_mean, r.clustered_std, r.ideal
            )
        })
        .collect::<Vec<_>>()
        .join("; "))
}

fn criterion_7() -> Outcome {
    let families = synthetic_families(6, 0);
    let base = synthetic_split(&families[..5], 10, 0).unwrap();
    let sixth = synthetic_split(&families[5..], 10, 50).unwrap();
    let reg = configure(
        &base.config,
        &GmnConfig::default(),
        &ClusterOptions::default(),
    )
    .unwrap()
    .registry;

    let plain = integrate(&reg, &sixth.config, false, &GmnConfig::default())
        .unwrap()
        .registry;
    for (name, entry) in &reg.packers {
        ensure!(
            serde_json::to_vec(entry).unwrap() == serde_json::to_vec(&plain.packers[name]).unwrap(),
            "clusters of {name} changed without fine-tuning"
        );
    }
    ensure!(
        stubmatch::gmn::params_to_blob(&plain.params)
            == stubmatch::gmn::params_to_blob(&reg.params),
        "model changed without fine-tuning"
    );

    let tuned = integrate(&reg, &sixth.config, true, &GmnConfig::default())
        .unwrap()
        .registry;
    let new_packer = families[5].packer_name.clone();
    let recall_of = |r: &Registry| {
        let hits = identify_batch(&sixth.held_out, r, &Clustered::default())
            .into_iter()
            .filter(|x| x.as_ref().unwrap().verdict.packer() == Some(new_packer.as_str()))
            .count();
        hits as f64 / sixth.held_out.len() as f64
    };
    let (recall_plain, recall_tuned) = (recall_of(&plain), recall_of(&tuned));

    ensure!(
        integration_cost(0, 10, 40, IntegrationMode::Packhero) == 400,
        "packhero cost"
    );
    ensure!(
        integration_cost(1000, 10, 40, IntegrationMode::Packhero) == 400,
        "packhero cost depends on n"
    );
    ensure!(
        integration_cost(90, 10, 40, IntegrationMode::Retrain) == 4000,
        "retrain cost"
    );
    let summary = format!("new packer recall {recall_tuned:.3} fine-tuned, {recall_plain:.3} without; other clusters byte-identical");
    ensure!(recall_tuned >= 0.9, "{summary}");
    Ok(summary)
}

fn criterion_8() -> Outcome {
    let a = names("a", 3);
    let reg = table_registry(&[("A", a, 0.8), ("B", names("b", 2), 0.8)]);
    let mut sim = TableSimilarity::new(-0.3);
    sim.set("a0", "a1", 0.9);
    sim.set("a0", "a2", 0.85);
    let r = Clustered::default()
        .identify_stub(&tiny_stub("a0", None), &reg, &sim)
        .unwrap();
    ensure!(
        r.verdict == Verdict::Packer("A".into()) && r.score == 1.0,
        "medoid case gave {} at {}",
        r.verdict,
        r.score
    );

    let sim = TableSimilarity::new(-0.1);
    let r = Clustered::default()
        .identify_stub(&tiny_stub("q", None), &reg, &sim)
        .unwrap();
    ensure!(
        r.verdict.is_unknown() && r.inference_calls == 2,
        "gating case gave {} after {} calls",
        r.verdict,
        r.inference_calls
    );

    let (a0, a1, b0, b1) = (
        names("a", 10),
        names("x", 10),
        names("b", 10),
        names("y", 10),
    );
    let reg = table_registry(&[
        ("A", a0.clone(), 0.7),
        ("A", a1.clone(), 0.7),
        ("B", b0.clone(), 0.7),
        ("B", b1, 0.7),
    ]);
    let mut sim = TableSimilarity::new(0.1);
    for id in a0
        .iter()
        .take(4)
        .chain(a1.iter().take(2))
        .chain(b0.iter().take(5))
    {
        sim.set("q", id, 0.75);
    }
    let r = Clustered::default()
        .identify_stub(&tiny_stub("q", None), &reg, &sim)
        .unwrap();
    ensure!(
        r.verdict == Verdict::Packer("A".into())
            && r.score == 6.0 / 20.0
            && r.per_packer_scores["B"] == 5.0 / 20.0,
        "argmax case gave {} at {}",
        r.verdict,
        r.score
    );
    Ok("medoid 1.0, gated UNKNOWN, 6/20 over 5/20".into())
}

fn snapshot(reg: &Registry) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("reg");
    reg.save(&path).unwrap();
    let mut files = Vec::new();
    let mut stack = vec![path.clone()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else {
                let rel = e.strip_prefix(&path).unwrap().display().to_string();
                files.push((rel, std::fs::read(&e).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn criterion_9() -> Outcome {
    let split = synthetic_split(&synthetic_families(3, 9), 6, 10).unwrap();
    let pipeline = || {
        let reg = configure(
            &split.config,
            &GmnConfig {
                epochs: 10,
                ..Default::default()
            },
            &ClusterOptions::default(),
        )
        .unwrap()
        .registry;
        let mut stream = Vec::new();
        for strategy in [&Clustered::default() as &dyn IdentifyStrategy, &Flat] {
            for r in identify_batch(&split.held_out, &reg, strategy) {
                stream.extend(serde_json::to_vec(&r.unwrap()).unwrap());
                stream.push(b'\n');
            }
        }
        (snapshot(&reg), stream)
    };
    let (files_a, stream_a) = pipeline();
    let (files_b, stream_b) = pipeline();
    ensure!(files_a == files_b, "registry files differ between runs");
    ensure!(stream_a == stream_b, "result streams differ between runs");
    Ok(format!(
        "{} registry files and {} result bytes identical",
        files_a.len(),
        stream_a.len()
    ))
}

fn main() {
    let min = |m: u64| Duration::from_secs(60 * m);
    let results = [
        run(1, Duration::from_secs(5), criterion_1),
        run(2, min(1), criterion_2),
        run(3, Duration::from_secs(30), criterion_3),
        run(4, Duration::from_secs(10), criterion_4),
        run(5, min(10), criterion_5),
        run(6, min(5), criterion_6),
        run(7, min(10), criterion_7),
        run(8, Duration::from_secs(5), criterion_8),
        run(9, min(5), criterion_9),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
