//! In-process surrogate for agent self-modification.
//!
//! An agent is a [`SimulatedAgentGenome`]: a point on a synthetic fitness
//! landscape plus a meta capability in `[0, 1]`. A modification draws
//! `1 + round(meta * (max_proposals - 1))` candidate steps and keeps the
//! fittest one, so a more capable modifier produces better children on
//! average. When self-improvement is enabled the child's meta capability is
//! itself perturbed; otherwise it is copied from the (frozen) modifier.
//!
//! The default landscape is deceptive: the start sits near a low local peak
//! and a higher global peak lies across a fitness valley.

use super::{GenerationBackend, GenerationError, GenerationRequest, Validity};
use crate::generation::sandbox::SandboxLimits;
use crate::selection::SelectionPolicy;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const GENOME_FILE: &str = "genome.json";
pub const DELTA_FILE: &str = "delta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Peak {
    pub center: Vec<f64>,
    pub height: f64,
    pub width: f64,
}

/// Maximum of Gaussian bumps; values lie in `[0, max height]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Landscape {
    pub peaks: Vec<Peak>,
}

impl Default for Landscape {
    fn default() -> Self {
        Self::two_peak()
    }
}

impl Landscape {
    /// Local peak of height 0.5 at the origin, global peak of height 1.0 at
    /// (3, 0); the valley between them bottoms out near 0.07.
    pub fn two_peak() -> Self {
        Self {
            peaks: vec![
                Peak {
                    center: vec![0.0, 0.0],
                    height: 0.5,
                    width: 0.6,
                },
                Peak {
                    center: vec![3.0, 0.0],
                    height: 1.0,
                    width: 0.6,
                },
            ],
        }
    }

    pub fn dims(&self) -> usize {
        self.peaks.first().map_or(0, |p| p.center.len())
    }

    pub fn fitness(&self, x: &[f64]) -> f64 {
        self.peaks
            .iter()
            .map(|p| {
                let d2: f64 = p.center.iter().zip(x).map(|(c, v)| (c - v).powi(2)).sum();
                p.height * (-d2 / (2.0 * p.width * p.width)).exp()
            })
            .fold(0.0, f64::max)
            .clamp(0.0, 1.0)
    }

    /// Highest attainable fitness.
    pub fn global_optimum(&self) -> f64 {
        self.peaks.iter().map(|p| p.height).fold(0.0, f64::max).min(1.0)
    }

    /// Whether `fitness` counts as having reached the global peak.
    pub fn at_global_peak(&self, fitness: f64) -> bool {
        let top = self.global_optimum();
        let runner_up = self
            .peaks
            .iter()
            .map(|p| p.height)
            .filter(|&h| h < top)
            .fold(0.0, f64::max);
        fitness > runner_up + 0.5 * (top - runner_up)
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = self.dims();
        if dims == 0 {
            return Err("landscape needs at least one peak with a non-empty center".into());
        }
        for p in &self.peaks {
            if p.center.len() != dims {
                return Err("all peak centers must share one dimension".into());
            }
            if !(p.width > 0.0) || !(0.0..=1.0).contains(&p.height) {
                return Err("peak width must be positive and height in [0, 1]".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedAgentGenome {
    pub task_skill: Vec<f64>,
    pub meta_capability: f64,
    pub compile_probability: f64,
    /// Parent-selection routine carried by the agent.
    #[serde(default)]
    pub selection: Option<SelectionPolicy>,
    /// Set when the modification produced an agent that fails to load.
    #[serde(default)]
    pub broken: bool,
}

impl SimulatedAgentGenome {
    pub fn validate(&self) -> Result<(), String> {
        if self.task_skill.iter().any(|v| !v.is_finite()) {
            return Err("non-finite task skill".into());
        }
        if !(0.0..=1.0).contains(&self.meta_capability) {
            return Err(format!("meta capability {} outside [0, 1]", self.meta_capability));
        }
        if !(0.0..=1.0).contains(&self.compile_probability) {
            return Err(format!(
                "compile probability {} outside [0, 1]",
                self.compile_probability
            ));
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, GenerationError> {
        let path = dir.join(GENOME_FILE);
        let bytes = fs::read(&path).map_err(|e| GenerationError::payload(&path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| GenerationError::Payload {
            path: path.clone(),
            reason: e.to_string(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), GenerationError> {
        fs::create_dir_all(dir).map_err(|e| GenerationError::payload(dir, e))?;
        let path = dir.join(GENOME_FILE);
        let mut bytes = serde_json::to_vec_pretty(self).expect("genome serializes");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| GenerationError::payload(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulatedParams {
    /// Global multiplier on every perturbation; 0 makes children exact copies.
    pub mutation_scale: f64,
    /// Standard deviation of an ordinary skill step.
    pub step_sigma: f64,
    /// Probability that a proposal by a modifier with meta capability 1 is
    /// a large jump.
    pub jump_probability: f64,
    /// Fraction of `jump_probability` left to a modifier with meta
    /// capability 0; capability 1 gets all of it.
    pub jump_floor: f64,
    /// Standard deviation of a large jump.
    pub jump_sigma: f64,
    /// Probability that a modification is a blind large jump that skips
    /// the best-of-proposals choice; the child still compiles.
    pub destructive_probability: f64,
    /// Standard deviation of a destructive jump.
    pub destructive_sigma: f64,
    /// Proposals drawn by a modifier with meta capability 1.
    pub max_proposals: usize,
    /// Expected fraction of the remaining headroom `1 - meta` that a
    /// self-modification gains.
    pub meta_gain: f64,
    /// Standard deviation of the meta-capability perturbation.
    pub meta_sigma: f64,
    /// Probability that a self-modification damages meta capability.
    pub meta_damage_probability: f64,
    /// Probability that a child rewrites its parent-selection routine.
    pub selection_mutation_rate: f64,
    pub initial: SimulatedAgentGenome,
}

impl Default for SimulatedParams {
    fn default() -> Self {
        Self {
            mutation_scale: 1.0,
            step_sigma: 0.3,
            jump_probability: 0.4,
            jump_floor: 0.0,
            jump_sigma: 2.0,
            destructive_probability: 0.25,
            destructive_sigma: 1.0,
            max_proposals: 8,
            meta_gain: 0.3,
            meta_sigma: 0.1,
            meta_damage_probability: 0.1,
            selection_mutation_rate: 0.2,
            initial: SimulatedAgentGenome {
                task_skill: vec![-0.6, 0.4],
                meta_capability: 0.15,
                compile_probability: 0.9,
                selection: Some(SelectionPolicy::UniformRandom),
                broken: false,
            },
        }
    }
}

impl SimulatedParams {
    /// Per-proposal jump probability of a modifier with capability `meta`.
    pub fn jump_chance(&self, meta: f64) -> f64 {
        (self.jump_probability * (self.jump_floor + (1.0 - self.jump_floor) * meta.clamp(0.0, 1.0))).clamp(0.0, 1.0)
    }

    pub fn proposals_for(&self, meta: f64) -> usize {
        1 + (meta.clamp(0.0, 1.0) * (self.max_proposals.max(1) - 1) as f64).round() as usize
    }
}

/// What a modification changed, written next to the child genome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeDelta {
    pub parent: String,
    pub modifier: String,
    pub skill_step: Vec<f64>,
    pub meta_change: f64,
    pub proposals: usize,
    pub selection_rewritten: bool,
    pub broken: bool,
}

/// The surrogate backend.
#[derive(Debug, Clone)]
pub struct SimulatedBackend {
    pub params: SimulatedParams,
    pub landscape: Landscape,
}

impl SimulatedBackend {
    pub fn new(params: SimulatedParams, landscape: Landscape) -> Self {
        Self { params, landscape }
    }

    fn random_policy<R: Rng + ?Sized>(rng: &mut R) -> SelectionPolicy {
        match rng.random_range(0..4u32) {
            0 => SelectionPolicy::ScoreChildProp {
                lambda: rng.random_range(1.0..20.0),
                midpoint_pool: rng.random_range(1..=5u64) as usize,
            },
            1 => SelectionPolicy::Softmax {
                temperature: rng.random_range(0.05..1.0),
            },
            2 => SelectionPolicy::Ucb {
                exploration_weight: rng.random_range(0.0..2.0),
                stagnation: rng.random_bool(0.5),
            },
            _ => SelectionPolicy::UniformRandom,
        }
    }

    /// Pure modification step: `modifier` edits `parent`.
    pub fn modify<R: Rng + ?Sized>(
        &self,
        parent: &SimulatedAgentGenome,
        modifier: &SimulatedAgentGenome,
        self_improve: bool,
        rng: &mut R,
    ) -> (SimulatedAgentGenome, GenomeDelta) {
        let p = &self.params;
        let scale = p.mutation_scale;
        let proposals = p.proposals_for(modifier.meta_capability);
        let mut best_skill = parent.task_skill.clone();
        let mut best_fit = f64::NEG_INFINITY;
        for _ in 0..proposals {
            let sigma = if rng.random_bool(p.jump_chance(modifier.meta_capability)) {
                p.jump_sigma
            } else {
                p.step_sigma
            } * scale;
            let candidate: Vec<f64> = parent
                .task_skill
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + sigma * z
                })
                .collect();
            let fit = self.landscape.fitness(&candidate);
            if fit > best_fit {
                best_fit = fit;
                best_skill = candidate;
            }
        }

        let destructive = rng.random_bool(p.destructive_probability.clamp(0.0, 1.0));
        if destructive {
            best_skill = parent
                .task_skill
                .iter()
                .map(|v| {
                    let z: f64 = StandardNormal.sample(rng);
                    v + p.destructive_sigma * scale * z
                })
                .collect();
        }

        let meta = if self_improve {
            let z: f64 = StandardNormal.sample(rng);
            let m0 = parent.meta_capability;
            let mut m = m0 + scale * (p.meta_gain * (1.0 - m0) + p.meta_sigma * z);
            let damaged = destructive || rng.random_bool(p.meta_damage_probability.clamp(0.0, 1.0));
            if scale > 0.0 && damaged {
                m -= rng.random_range(0.2..0.6);
            }
            m.clamp(0.0, 1.0)
        } else {
            modifier.meta_capability
        };

        let mut selection = parent.selection;
        let mut selection_rewritten = false;
        if self_improve
            && scale > 0.0
            && rng.random_bool(p.selection_mutation_rate.clamp(0.0, 1.0))
        {
            selection = Some(Self::random_policy(rng));
            selection_rewritten = true;
        }

        let broken = !rng.random_bool(parent.compile_probability.clamp(0.0, 1.0));
        let skill_step = best_skill
            .iter()
            .zip(&parent.task_skill)
            .map(|(a, b)| a - b)
            .collect();
        let child = SimulatedAgentGenome {
            task_skill: best_skill,
            meta_capability: meta,
            compile_probability: parent.compile_probability,
            selection,
            broken,
        };
        let delta = GenomeDelta {
            parent: String::new(),
            modifier: String::new(),
            skill_step,
            meta_change: meta - parent.meta_capability,
            proposals,
            selection_rewritten,
            broken,
        };
        (child, delta)
    }
}

impl GenerationBackend for SimulatedBackend {
    fn name(&self) -> &'static str {
        "simulated"
    }

    fn write_initial(&self, dir: &Path) -> Result<(), GenerationError> {
        self.params.initial.write(dir)
    }

    fn generate(
        &self,
        req: &GenerationRequest,
        parent_dir: &Path,
        modifier_dir: &Path,
        child_dir: &Path,
        _limits: &SandboxLimits,
    ) -> Result<String, GenerationError> {
        let parent = SimulatedAgentGenome::read(parent_dir)?;
        let modifier = SimulatedAgentGenome::read(modifier_dir)?;
        let mut rng = req.stream.rng(req.master_seed);
        let (child, mut delta) = self.modify(&parent, &modifier, req.self_improve, &mut rng);
        delta.parent = req.parent_payload_ref.clone();
        delta.modifier = req.modifier_payload_ref.clone();
        child.write(child_dir)?;
        let path = child_dir.join(DELTA_FILE);
        let mut bytes = serde_json::to_vec_pretty(&delta).expect("delta serializes");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| GenerationError::payload(&path, e))?;
        Ok(format!(
            "simulated modification: {} proposals, meta change {:+.4}",
            delta.proposals, delta.meta_change
        ))
    }

    fn validate(&self, payload_dir: &Path, _limits: &SandboxLimits) -> Validity {
        let genome = match SimulatedAgentGenome::read(payload_dir) {
            Ok(g) => g,
            Err(e) => return Validity::invalid(format!("load failure: {e}")),
        };
        if genome.broken {
            return Validity::invalid("load failure: agent does not start");
        }
        if let Err(e) = genome.validate() {
            return Validity::invalid(format!("malformed genome: {e}"));
        }
        if genome.task_skill.len() != self.landscape.dims() {
            return Validity::invalid("genome dimension does not match the landscape");
        }
        // smoke task: one fitness evaluation must yield a well-formed score
        let f = self.landscape.fitness(&genome.task_skill);
        if f.is_finite() {
            Validity::valid()
        } else {
            Validity::invalid("smoke task produced a non-finite score")
        }
    }

    fn selection_routine(&self, payload_dir: &Path) -> Result<SelectionPolicy, GenerationError> {
        let genome = SimulatedAgentGenome::read(payload_dir)?;
        let policy = genome.selection.ok_or_else(|| GenerationError::Payload {
            path: payload_dir.join(GENOME_FILE),
            reason: "agent carries no selection routine".into(),
        })?;
        policy
            .validate()
            .map_err(|e| GenerationError::Backend(e.to_string()))?;
        Ok(policy)
    }
}
