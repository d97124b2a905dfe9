//! Progress series and lineage from the event log or the persisted archive.

use super::MetricsError;
use crate::archive::{AgentNode, Archive, NodeId};
use crate::engine::events::{Event, EventRecord};
use crate::mode::Mode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressRow {
    pub iteration: u64,
    /// Highest selection score of any agent archived so far.
    pub best_so_far: f64,
    /// Mean selection score of the agents in the archive at this iteration.
    pub avg_compiled: f64,
    pub archive_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressSeries {
    pub rows: Vec<ProgressRow>,
    pub best_node: NodeId,
    /// Root-first ancestry of `best_node`.
    pub best_lineage: Vec<NodeId>,
}

/// A run rebuilt from its event log.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub mode: Mode,
    pub run_id: String,
    /// Archive as the engine held it at the end of the log.
    pub archive: Archive,
    /// Every agent ever archived, with its true parent. Equal to `archive`
    /// except in the single-agent mode, where the archive keeps only the
    /// latest agent.
    pub tree: Archive,
    pub completed_iterations: u64,
    /// One entry per generation attempt in log order: the child's selection
    /// score, or `None` when it failed validation.
    pub attempts: Vec<Option<f64>>,
}

impl Reconstruction {
    /// Scores of the valid children among the first `k` attempts.
    pub fn scores_within(&self, k: usize) -> Vec<f64> {
        self.attempts.iter().take(k).flatten().copied().collect()
    }
}

/// Replays the log.
pub fn reconstruct(records: &[EventRecord]) -> Result<Reconstruction, MetricsError> {
    rebuild(records, |_, _| {})
}

fn rebuild(
    records: &[EventRecord],
    mut on_iteration: impl FnMut(u64, &Reconstruction),
) -> Result<Reconstruction, MetricsError> {
    let corrupt = |seq: u64, why: String| MetricsError::CorruptLog(format!("event {seq}: {why}"));
    let (mode, run_id) = match records.first().map(|r| &r.event) {
        Some(Event::RunStarted { mode, run_id, .. }) => (*mode, run_id.clone()),
        _ => return Err(MetricsError::CorruptLog("log does not start with run-started".into())),
    };
    let mut rec: Option<Reconstruction> = None;
    for r in records {
        match &r.event {
            Event::RootEvaluated { node, .. } => {
                let archive = Archive::with_root(mode, run_id.clone(), node.clone())
                    .map_err(|e| corrupt(r.seq, e.to_string()))?;
                let tree = Archive::with_root(Mode::Full, run_id.clone(), node.clone())
                    .map_err(|e| corrupt(r.seq, e.to_string()))?;
                let built = Reconstruction {
                    mode,
                    run_id: run_id.clone(),
                    archive,
                    tree,
                    completed_iterations: 0,
                    attempts: Vec::new(),
                };
                on_iteration(0, &built);
                rec = Some(built);
            }
            Event::Generation { .. } => {
                rec.as_mut()
                    .ok_or_else(|| corrupt(r.seq, "generation before root".into()))?
                    .attempts
                    .push(None);
            }
            Event::Evaluation { selection_score, .. } => {
                let last = rec
                    .as_mut()
                    .ok_or_else(|| corrupt(r.seq, "evaluation before root".into()))?
                    .attempts
                    .last_mut()
                    .ok_or_else(|| corrupt(r.seq, "evaluation without a generation".into()))?;
                *last = Some(*selection_score);
            }
            Event::ArchiveAdd { node, .. } => {
                let b = rec.as_mut().ok_or_else(|| corrupt(r.seq, "archive add before root".into()))?;
                b.archive
                    .add_node(node.clone())
                    .map_err(|e| corrupt(r.seq, e.to_string()))?;
                b.tree
                    .add_node(node.clone())
                    .map_err(|e| corrupt(r.seq, e.to_string()))?;
            }
            Event::TestEvaluated { node, scores } => {
                let b = rec.as_mut().ok_or_else(|| corrupt(r.seq, "test before root".into()))?;
                for (domain, score) in scores {
                    b.archive
                        .set_test_score(*node, domain, *score)
                        .map_err(|e| corrupt(r.seq, e.to_string()))?;
                    b.tree
                        .set_test_score(*node, domain, *score)
                        .map_err(|e| corrupt(r.seq, e.to_string()))?;
                }
            }
            Event::IterationComplete { iteration, .. } => {
                let b = rec.as_mut().ok_or_else(|| corrupt(r.seq, "iteration before root".into()))?;
                b.completed_iterations = *iteration;
                on_iteration(*iteration, b);
            }
            _ => {}
        }
    }
    rec.ok_or_else(|| MetricsError::CorruptLog("log has no root evaluation".into()))
}

fn row<'a>(
    iteration: u64,
    present: impl Iterator<Item = &'a AgentNode>,
    best_so_far: f64,
) -> ProgressRow {
    let (sum, n) = present.fold((0.0, 0usize), |(s, n), node| (s + node.selection_score(), n + 1));
    ProgressRow {
        iteration,
        best_so_far,
        avg_compiled: if n == 0 { 0.0 } else { sum / n as f64 },
        archive_size: n,
    }
}

fn best_of<'a>(nodes: impl Iterator<Item = &'a AgentNode>) -> Option<&'a AgentNode> {
    nodes.fold(None, |best: Option<&AgentNode>, n| match best {
        Some(b) if b.selection_score() >= n.selection_score() => Some(b),
        _ => Some(n),
    })
}

/// Series from the log: one row for the root evaluation and one per
/// completed iteration.
pub fn progress_from_events(records: &[EventRecord]) -> Result<ProgressSeries, MetricsError> {
    let mut rows = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let rec = rebuild(records, |iteration, b| {
        for n in b.tree.nodes() {
            best = best.max(n.selection_score());
        }
        rows.push(row(iteration, b.archive.nodes().iter(), best));
    })?;
    let best_node = best_of(rec.tree.nodes().iter()).expect("tree has a root").id;
    Ok(ProgressSeries {
        rows,
        best_node,
        best_lineage: rec.tree.lineage(best_node)?,
    })
}

/// Series from a persisted archive for iterations `0..=iterations`. The
/// single-agent mode cannot be reconstructed this way.
pub fn progress_from_archive(archive: &Archive, iterations: u64) -> Result<ProgressSeries, MetricsError> {
    if !archive.mode().keeps_archive() {
        return Err(crate::archive::ArchiveError::SingleAgentMode(archive.mode().as_str()).into());
    }
    let mut rows = Vec::with_capacity(iterations as usize + 1);
    let mut best = f64::NEG_INFINITY;
    for t in 0..=iterations {
        let present = || archive.nodes().iter().filter(move |n| n.created_at_iteration <= t);
        for n in present() {
            best = best.max(n.selection_score());
        }
        rows.push(row(t, present(), best));
    }
    let best_node = best_of(archive.nodes().iter()).ok_or(crate::archive::ArchiveError::Empty)?.id;
    Ok(ProgressSeries {
        rows,
        best_node,
        best_lineage: archive.lineage(best_node)?,
    })
}
