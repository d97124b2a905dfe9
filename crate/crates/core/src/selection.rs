//! Parent selection over the archive.
//!
//! Every policy yields a categorical distribution over the current archive;
//! parents are then drawn from it independently with replacement. The
//! deterministic UCB rule is expressed as a one-hot distribution (ties split
//! evenly) so that all policies share the same sampling path.

use crate::archive::{Archive, NodeId};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("cannot select from an empty archive view")]
    EmptyView,
    #[error("invalid selection parameter: {0}")]
    InvalidParameter(String),
}

/// Parameters of the score/child-count proportional rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreChildPropParams {
    /// Sharpness of the sigmoid.
    pub lambda: f64,
    /// Number of top scores averaged into the midpoint.
    pub midpoint_pool: usize,
}

impl Default for ScoreChildPropParams {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            midpoint_pool: 3,
        }
    }
}

/// A parameterized parent-selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SelectionPolicy {
    ScoreChildProp {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_pool")]
        midpoint_pool: usize,
    },
    UniformRandom,
    Softmax {
        temperature: f64,
    },
    Ucb {
        exploration_weight: f64,
        /// Boost exploration by 1.4x while score variance is below 0.01.
        #[serde(default)]
        stagnation: bool,
    },
}

fn default_lambda() -> f64 {
    ScoreChildPropParams::default().lambda
}

fn default_pool() -> usize {
    ScoreChildPropParams::default().midpoint_pool
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        SelectionPolicy::score_child_prop(ScoreChildPropParams::default())
    }
}

impl SelectionPolicy {
    pub fn score_child_prop(p: ScoreChildPropParams) -> Self {
        SelectionPolicy::ScoreChildProp {
            lambda: p.lambda,
            midpoint_pool: p.midpoint_pool,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SelectionPolicy::ScoreChildProp { .. } => "score-child-prop",
            SelectionPolicy::UniformRandom => "uniform-random",
            SelectionPolicy::Softmax { .. } => "softmax",
            SelectionPolicy::Ucb { .. } => "ucb",
        }
    }

    pub fn validate(&self) -> Result<(), SelectionError> {
        let bad = |m: String| Err(SelectionError::InvalidParameter(m));
        match *self {
            SelectionPolicy::ScoreChildProp {
                lambda,
                midpoint_pool,
            } => {
                if !(lambda > 0.0 && lambda.is_finite()) {
                    return bad(format!("lambda must be positive, got {lambda}"));
                }
                if midpoint_pool == 0 {
                    return bad("midpoint_pool must be at least 1".into());
                }
            }
            SelectionPolicy::Softmax { temperature } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return bad(format!("temperature must be positive, got {temperature}"));
                }
            }
            SelectionPolicy::Ucb {
                exploration_weight, ..
            } => {
                if !(exploration_weight >= 0.0 && exploration_weight.is_finite()) {
                    return bad(format!(
                        "exploration_weight must be non-negative, got {exploration_weight}"
                    ));
                }
            }
            SelectionPolicy::UniformRandom => {}
        }
        Ok(())
    }
}

/// What selection sees of one archive member.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: NodeId,
    pub score: f64,
    pub compiled_children: u32,
}

/// Selection view of an archive, in archive order.
pub fn view(archive: &Archive) -> Vec<Candidate> {
    archive
        .nodes()
        .iter()
        .map(|n| Candidate {
            id: n.id,
            score: n.selection_score(),
            compiled_children: n.compiled_children,
        })
        .collect()
}

/// Intermediate quantities and the final distribution.
///
/// `sigmoid` and `novelty` are only populated for score-child-prop; `weights`
/// holds the unnormalized quantity each policy normalizes (softmax terms,
/// UCB scores, or `s_i * h_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionBreakdown {
    pub ids: Vec<NodeId>,
    pub midpoint: Option<f64>,
    pub sigmoid: Vec<f64>,
    pub novelty: Vec<f64>,
    pub weights: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Mean of the top `min(m, len)` scores.
pub fn dynamic_midpoint(scores: &[f64], m: usize) -> Result<f64, SelectionError> {
    if scores.is_empty() {
        return Err(SelectionError::EmptyView);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let take = m.clamp(1, sorted.len());
    Ok(sorted[..take].iter().sum::<f64>() / take as f64)
}

/// Logistic transform centred on `midpoint`.
pub fn sigmoid_transform(alpha: f64, midpoint: f64, lambda: f64) -> f64 {
    1.0 / (1.0 + (-lambda * (alpha - midpoint)).exp())
}

/// `1 / (1 + n)`.
pub fn novelty_bonus(n_children: u32) -> f64 {
    1.0 / (1.0 + n_children as f64)
}

/// Normalizes non-negative weights; falls back to uniform when they sum to 0.
pub fn normalize_weights(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        weights.iter().map(|w| w / total).collect()
    } else {
        let n = weights.len() as f64;
        vec![1.0 / n; weights.len()]
    }
}

/// Min-max normalization; all-equal inputs map to 0.5.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        scores.iter().map(|s| (s - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; scores.len()]
    }
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Effective UCB exploration weight after the optional stagnation boost.
pub fn effective_exploration_weight(scores: &[f64], weight: f64, stagnation: bool) -> f64 {
    if stagnation && !scores.is_empty() && population_variance(scores) < 0.01 {
        weight * 1.4
    } else {
        weight
    }
}

/// `normalized + weight * sqrt(ln(total_children + 1) / (children_i + 1))`.
pub fn ucb_scores(normalized: &[f64], children: &[u32], weight: f64) -> Vec<f64> {
    let total: f64 = children.iter().map(|&c| c as f64).sum();
    normalized
        .iter()
        .zip(children)
        .map(|(s, &c)| s + weight * ((total + 1.0).ln() / (c as f64 + 1.0)).sqrt())
        .collect()
}

/// One-hot on the maximum, ties within 1e-12 sharing mass evenly.
pub fn argmax_one_hot(values: &[f64]) -> Vec<f64> {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<bool> = values.iter().map(|v| best - v <= 1e-12).collect();
    let count = tied.iter().filter(|&&t| t).count() as f64;
    tied.iter().map(|&t| if t { 1.0 / count } else { 0.0 }).collect()
}

/// Midpoint pool: the `m` best candidates by (score desc, id asc).
fn midpoint_of(view: &[Candidate], m: usize) -> f64 {
    let mut ranked: Vec<&Candidate> = view.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id)));
    let take = m.clamp(1, ranked.len());
    ranked[..take].iter().map(|c| c.score).sum::<f64>() / take as f64
}

/// Categorical parent distribution for `view` under `policy`.
pub fn selection_distribution(
    view: &[Candidate],
    policy: &SelectionPolicy,
) -> Result<SelectionBreakdown, SelectionError> {
    if view.is_empty() {
        return Err(SelectionError::EmptyView);
    }
    policy.validate()?;
    let ids: Vec<NodeId> = view.iter().map(|c| c.id).collect();
    let scores: Vec<f64> = view.iter().map(|c| c.score).collect();
    let n = view.len();
    let breakdown = match *policy {
        SelectionPolicy::ScoreChildProp {
            lambda,
            midpoint_pool,
        } => {
            let midpoint = midpoint_of(view, midpoint_pool);
            let sigmoid: Vec<f64> = scores
                .iter()
                .map(|&a| sigmoid_transform(a, midpoint, lambda))
                .collect();
            let novelty: Vec<f64> = view.iter().map(|c| novelty_bonus(c.compiled_children)).collect();
            let weights: Vec<f64> = sigmoid.iter().zip(&novelty).map(|(s, h)| s * h).collect();
            let probabilities = normalize_weights(&weights);
            SelectionBreakdown {
                ids,
                midpoint: Some(midpoint),
                sigmoid,
                novelty,
                weights,
                probabilities,
            }
        }
        SelectionPolicy::UniformRandom => SelectionBreakdown {
            ids,
            midpoint: None,
            sigmoid: Vec::new(),
            novelty: Vec::new(),
            weights: vec![1.0; n],
            probabilities: vec![1.0 / n as f64; n],
        },
        SelectionPolicy::Softmax { temperature } => {
            let normalized = min_max_normalize(&scores);
            // shifting by the max leaves the normalized result unchanged
            let top = normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = normalized
                .iter()
                .map(|s| ((s - top) / temperature).exp())
                .collect();
            let probabilities = normalize_weights(&weights);
            SelectionBreakdown {
                ids,
                midpoint: None,
                sigmoid: Vec::new(),
                novelty: Vec::new(),
                weights,
                probabilities,
            }
        }
        SelectionPolicy::Ucb {
            exploration_weight,
            stagnation,
        } => {
            let weight = effective_exploration_weight(&scores, exploration_weight, stagnation);
            let normalized = min_max_normalize(&scores);
            let children: Vec<u32> = view.iter().map(|c| c.compiled_children).collect();
            let weights = ucb_scores(&normalized, &children, weight);
            let probabilities = argmax_one_hot(&weights);
            SelectionBreakdown {
                ids,
                midpoint: None,
                sigmoid: Vec::new(),
                novelty: Vec::new(),
                weights,
                probabilities,
            }
        }
    };
    Ok(breakdown)
}

/// Draws `count` ids i.i.d. from the breakdown's distribution.
pub fn sample_parents<R: Rng + ?Sized>(
    breakdown: &SelectionBreakdown,
    count: usize,
    rng: &mut R,
) -> Vec<NodeId> {
    let cumulative: Vec<f64> = breakdown
        .probabilities
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap_or(&0.0);
    // the last index with positive mass absorbs rounding at the top end
    let last_positive = breakdown
        .probabilities
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(0);
    (0..count)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * total;
            // the first index whose cumulative mass exceeds u always has positive mass
            let idx = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(last_positive);
            breakdown.ids[idx]
        })
        .collect()
}
