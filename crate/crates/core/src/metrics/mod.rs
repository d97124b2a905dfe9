//! Run analytics: improvement@k, lineage-discounted growth, bootstrap
//! confidence intervals and progress series.

pub mod export;
pub mod series;

use crate::archive::{Archive, ArchiveError, NodeId};
use crate::par::Exec;
use crate::rng::{index, StreamId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use series::{progress_from_archive, progress_from_events, reconstruct, ProgressRow, ProgressSeries, Reconstruction};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("node {0} has no descendants")]
    NoDescendants(NodeId),
    #[error("no node has at least {0} descendants")]
    NoEligible(usize),
    #[error("no samples")]
    EmptySamples,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("corrupt event log: {0}")]
    CorruptLog(String),
}

/// Best score among the first `k` generated agents minus the initial
/// agent's score; 0 when nothing was generated.
pub fn improvement_at_k(initial: f64, generated: &[f64], k: usize) -> f64 {
    generated
        .iter()
        .take(k)
        .copied()
        .reduce(f64::max)
        .map_or(0.0, |best| best - initial)
}

/// Test-score improvement of the agent with the highest selection score
/// over the root. `None` unless both carry test scores.
pub fn validation_selected_improvement(archive: &Archive) -> Option<(NodeId, f64)> {
    let best = archive.best_by_selection()?;
    let root = archive.get(0).ok()?;
    Some((best.id, best.test_score()? - root.test_score()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthScoreParams {
    pub gamma: f64,
    pub min_descendants: usize,
}

impl Default for GrowthScoreParams {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            min_descendants: 3,
        }
    }
}

impl GrowthScoreParams {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(MetricsError::InvalidParameter("gamma must lie in (0, 1]".into()));
        }
        if self.min_descendants == 0 {
            return Err(MetricsError::InvalidParameter("min_descendants must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over descendants `j` of `(alpha_j - alpha_i) * gamma^dist(i, j)`,
/// with selection scores as `alpha`.
pub fn growth_score(archive: &Archive, id: NodeId, gamma: f64) -> Result<f64, MetricsError> {
    let alpha_i = archive.get(id)?.selection_score();
    let descendants = archive.descendants(id)?;
    if descendants.is_empty() {
        return Err(MetricsError::NoDescendants(id));
    }
    let mut total = 0.0;
    for &j in &descendants {
        let d = archive.tree_distance(id, j)?;
        total += (archive.get(j)?.selection_score() - alpha_i) * gamma.powi(d as i32);
    }
    Ok(total / descendants.len() as f64)
}

/// Node with the highest growth score among those with at least
/// `min_descendants` descendants; ties go to the lowest id.
pub fn transfer_select(archive: &Archive, params: &GrowthScoreParams) -> Result<(NodeId, f64), MetricsError> {
    params.validate()?;
    let mut best: Option<(NodeId, f64)> = None;
    for node in archive.nodes() {
        if archive.descendants(node.id)?.len() < params.min_descendants {
            continue;
        }
        let g = growth_score(archive, node.id, params.gamma)?;
        if best.is_none_or(|(_, b)| g > b) {
            best = Some((node.id, g));
        }
    }
    best.ok_or(MetricsError::NoEligible(params.min_descendants))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapParams {
    pub resamples: usize,
    /// Confidence level in (0, 1).
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapParams {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BootstrapCi {
    /// True when the intervals share no point.
    pub fn disjoint(&self, other: &BootstrapCi) -> bool {
        self.lower > other.upper || other.lower > self.upper
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    median_sorted(&v)
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Percentile of sorted data with linear interpolation between ranks.
pub fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap interval for the median. Resample `r` draws its
/// indices from the substream `("bootstrap", 0, r)` of `params.seed`, so the
/// result does not depend on `exec`.
pub fn bootstrap_ci(samples: &[f64], params: &BootstrapParams, exec: Exec) -> Result<BootstrapCi, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    if params.resamples == 0 || !(params.level > 0.0 && params.level < 1.0) {
        return Err(MetricsError::InvalidParameter(
            "need resamples >= 1 and level in (0, 1)".into(),
        ));
    }
    let n = samples.len();
    let mut medians = exec.map_range(params.resamples, |r| {
        let mut rng = StreamId::new("bootstrap", 0, r as u64).rng(params.seed);
        let mut draw: Vec<f64> = (0..n).map(|_| samples[index(&mut rng, n)]).collect();
        draw.sort_by(f64::total_cmp);
        median_sorted(&draw)
    });
    medians.sort_by(f64::total_cmp);
    let tail = (1.0 - params.level) / 2.0;
    Ok(BootstrapCi {
        median: median(samples),
        lower: percentile_sorted(&medians, tail),
        upper: percentile_sorted(&medians, 1.0 - tail),
    })
}
