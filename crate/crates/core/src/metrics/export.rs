//! CSV and DOT exports.

use super::{BootstrapCi, BootstrapParams, ProgressSeries};
use crate::archive::{Archive, NodeId};
use serde::Serialize;
use std::fmt::Write as _;
use std::io::Write;

pub type CsvResult = Result<(), csv::Error>;

fn write_rows<W: Write, T: Serialize>(out: W, rows: impl IntoIterator<Item = T>) -> CsvResult {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per iteration.
pub fn progress_csv<W: Write>(out: W, series: &ProgressSeries) -> CsvResult {
    write_rows(out, &series.rows)
}

#[derive(Serialize)]
struct LineageRow {
    depth: usize,
    node: NodeId,
}

/// Lineage of the best agent, root first.
pub fn lineage_csv<W: Write>(out: W, series: &ProgressSeries) -> CsvResult {
    write_rows(
        out,
        series
            .best_lineage
            .iter()
            .enumerate()
            .map(|(depth, &node)| LineageRow { depth, node }),
    )
}

/// Per-run scalar row for improvement@k.
#[derive(Debug, Clone, Serialize)]
pub struct ImpAtKRow {
    pub run_id: String,
    pub k: usize,
    pub initial: f64,
    pub imp_at_k: f64,
    pub validation_selected_node: Option<NodeId>,
    pub validation_selected_test_delta: Option<f64>,
}

pub fn impk_csv<W: Write>(out: W, rows: &[ImpAtKRow]) -> CsvResult {
    write_rows(out, rows)
}

/// Per-run scalar row for transfer-agent selection.
#[derive(Debug, Clone, Serialize)]
pub struct TransferRow {
    pub run_id: String,
    pub gamma: f64,
    pub min_descendants: usize,
    pub node: NodeId,
    pub growth_score: f64,
    pub descendants: usize,
}

pub fn transfer_csv<W: Write>(out: W, rows: &[TransferRow]) -> CsvResult {
    write_rows(out, rows)
}

#[derive(Serialize)]
struct CiRow<'a> {
    statistic: &'a str,
    n: usize,
    resamples: usize,
    level: f64,
    seed: u64,
    median: f64,
    lower: f64,
    upper: f64,
}

pub fn ci_csv<W: Write>(out: W, statistic: &str, n: usize, params: &BootstrapParams, ci: &BootstrapCi) -> CsvResult {
    write_rows(
        out,
        [CiRow {
            statistic,
            n,
            resamples: params.resamples,
            level: params.level,
            seed: params.seed,
            median: ci.median,
            lower: ci.lower,
            upper: ci.upper,
        }],
    )
}

/// Graphviz digraph with one node per agent and one edge per parent link.
pub fn tree_dot(archive: &Archive) -> String {
    let mut s = String::from("digraph archive {\n  node [shape=box];\n");
    for n in archive.nodes() {
        let _ = writeln!(
            s,
            "  n{} [label=\"{} | {:.4}\"];",
            n.id,
            n.id,
            n.selection_score()
        );
    }
    for n in archive.nodes() {
        if let Some(p) = n.parent_id.filter(|p| archive.contains(*p)) {
            let _ = writeln!(s, "  n{p} -> n{};", n.id);
        }
    }
    s.push_str("}\n");
    s
}
