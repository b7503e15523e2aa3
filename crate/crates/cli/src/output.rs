//! Rendering of results as JSON lines, CSV or an aligned table.

use std::io::Write;

use anyhow::Result;
use serde::Serialize;
use stubmatch::identify::IdentificationResult;
use stubmatch::metrics::{BenchRow, MetricsReport};
use stubmatch::registry::Registry;

use crate::config::Format;

/// Header plus rows of already formatted cells.
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_aligned(&self, out: &mut dyn Write) -> Result<()> {
        let mut width: Vec<usize> = self.header.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            cells
                .iter()
                .zip(&width)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        writeln!(out, "{}", line(self.header.clone()))?;
        for r in &self.rows {
            writeln!(out, "{}", line(r.iter().map(String::as_str).collect()))?;
        }
        Ok(())
    }
}

/// Writes `items` one JSON object per line, or `table` as CSV / aligned text.
pub fn emit<T: Serialize>(
    out: &mut dyn Write,
    format: Format,
    items: &[T],
    table: impl FnOnce() -> Table,
) -> Result<()> {
    match format {
        Format::Json => {
            for it in items {
                serde_json::to_writer(&mut *out, it)?;
                writeln!(out)?;
            }
        }
        Format::Csv => table().write_csv(out)?,
        Format::Table => table().write_aligned(out)?,
    }
    Ok(())
}

pub fn results_table(results: &[IdentificationResult]) -> Table {
    Table {
        header: vec![
            "sample_id",
            "verdict",
            "score",
            "inference_calls",
            "stub_branch",
            "per_packer_scores",
        ],
        rows: results
            .iter()
            .map(|r| {
                let scores = r
                    .per_packer_scores
                    .iter()
                    .map(|(p, s)| format!("{p}={s:.4}"))
                    .collect::<Vec<_>>()
                    .join(";");
                vec![
                    r.sample_id.clone(),
                    r.verdict.to_string(),
                    format!("{:.4}", r.score),
                    r.inference_calls.to_string(),
                    r.stub_branch.to_string(),
                    scores,
                ]
            })
            .collect(),
    }
}

pub fn metrics_table(m: &MetricsReport) -> Table {
    let mut rows: Vec<Vec<String>> = m
        .per_packer
        .iter()
        .map(|p| {
            vec![
                p.packer.clone(),
                format!("{:.4}", p.precision),
                format!("{:.4}", p.recall),
                format!("{:.4}", p.f1),
                format!("{:.4}", p.accuracy),
                format!("{:.4}", p.fpr),
                p.unknown.to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        "macro".into(),
        format!("{:.4}", m.macro_precision),
        format!("{:.4}", m.macro_recall),
        format!("{:.4}", m.macro_f1),
        format!("{:.4}", m.macro_accuracy),
        format!("{:.4}", m.macro_fpr),
        m.per_packer
            .iter()
            .map(|p| p.unknown)
            .sum::<usize>()
            .to_string(),
    ]);
    Table {
        header: vec![
            "packer",
            "precision",
            "recall",
            "f1",
            "accuracy",
            "fpr",
            "unknown",
        ],
        rows,
    }
}

pub fn bench_table(rows: &[BenchRow]) -> Table {
    Table {
        header: vec![
            "samples_per_packer",
            "packers",
            "clusters",
            "ideal",
            "clustered",
            "flat",
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.samples_per_packer.to_string(),
                    r.packers.to_string(),
                    r.clusters.to_string(),
                    format!("{:.2}", r.ideal),
                    format!("{:.2} ± {:.2}", r.clustered_mean, r.clustered_std),
                    format!("{:.2} ± {:.2}", r.flat_mean, r.flat_std),
                ]
            })
            .collect(),
    }
}

/// One row per cluster for `clusters inspect`.
#[derive(Debug, Serialize)]
pub struct ClusterRow {
    pub packer: String,
    pub cluster: usize,
    pub size: usize,
    pub medoid: String,
    pub threshold: f64,
    pub low_confidence: bool,
}

pub fn cluster_rows(reg: &Registry) -> Result<Vec<ClusterRow>> {
    let mut rows = Vec::new();
    for (packer, entry) in &reg.packers {
        for (i, c) in entry.clusters.iter().enumerate() {
            rows.push(ClusterRow {
                packer: packer.clone(),
                cluster: i,
                size: c.member_ids.len(),
                medoid: reg.graph(&c.medoid_id)?.sample_id().to_string(),
                threshold: c.threshold,
                low_confidence: c.low_confidence,
            });
        }
    }
    Ok(rows)
}

pub fn cluster_table(rows: &[ClusterRow]) -> Table {
    Table {
        header: vec![
            "packer",
            "cluster",
            "size",
            "medoid",
            "threshold",
            "low_confidence",
        ],
        rows: rows
            .iter()
            .map(|r| {
                vec![
                    r.packer.clone(),
                    r.cluster.to_string(),
                    r.size.to_string(),
                    r.medoid.clone(),
                    format!("{:.4}", r.threshold),
                    r.low_confidence.to_string(),
                ]
            })
            .collect(),
    }
}
