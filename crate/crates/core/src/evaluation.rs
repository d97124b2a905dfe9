//! Staged, gated evaluation of agents across domains.
//!
//! Each domain lists its training tasks in a fixed order. The first
//! `subset_size` tasks are evaluated and a gate decides whether the agent
//! earns the rest; a gated-out agent scores 0 on every task it was not
//! evaluated on. With several domains all subsets run first and one failed
//! gate gates out every domain. A task counts as a success when it scores
//! above 0.
//!
//! Validation tasks, when present, are evaluated in full only for agents
//! that passed every gate and are zero-filled otherwise.

use crate::archive::{AgentNode, DomainScores, NodeId};
use crate::generation::sandbox::{sandbox_execute, SandboxCommand, SandboxLimits};
use crate::generation::simulated::{Landscape, SimulatedAgentGenome};
use crate::par::Exec;
use crate::rng::StreamId;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("task {task_id} failed: {cause}")]
    Task { task_id: String, cause: String },
    #[error("node {node} has no evaluation record for domain `{domain}`")]
    NoRecord { node: NodeId, domain: String },
    #[error("invalid domain `{domain}`: {reason}")]
    InvalidSpec { domain: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GatePolicy {
    /// Passes when at least `k` subset tasks succeed.
    MinSuccesses { k: usize },
    /// Passes when the success fraction exceeds (`strict`) or reaches `fraction`.
    MinFraction { fraction: f64, strict: bool },
}

impl GatePolicy {
    pub fn passes(&self, successes: usize, evaluated: usize) -> bool {
        match *self {
            GatePolicy::MinSuccesses { k } => successes >= k,
            GatePolicy::MinFraction { fraction, strict } => {
                if evaluated == 0 {
                    return false;
                }
                let f = successes as f64 / evaluated as f64;
                if strict {
                    f > fraction
                } else {
                    f >= fraction
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagedEvalPolicy {
    pub subset_size: usize,
    pub gate: GatePolicy,
    pub full_size: usize,
}

impl StagedEvalPolicy {
    /// Evaluate everything; the gate always passes.
    pub fn ungated(n: usize) -> Self {
        Self {
            subset_size: n,
            gate: GatePolicy::MinSuccesses { k: 0 },
            full_size: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Training tasks; the subset is the first `staged.subset_size` of them.
    pub task_ids: Vec<String>,
    pub staged: StagedEvalPolicy,
    #[serde(default)]
    pub validation_task_ids: Vec<String>,
    #[serde(default)]
    pub test_task_ids: Vec<String>,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, task_ids: Vec<String>, staged: StagedEvalPolicy) -> Self {
        Self {
            name: name.into(),
            task_ids,
            staged,
            validation_task_ids: Vec::new(),
            test_task_ids: Vec::new(),
        }
    }

    pub fn has_validation(&self) -> bool {
        !self.validation_task_ids.is_empty()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |reason: String| EvalError::InvalidSpec {
            domain: self.name.clone(),
            reason,
        };
        if self.task_ids.is_empty() {
            return Err(bad("task_ids must not be empty".into()));
        }
        for (split, ids) in [
            ("task_ids", &self.task_ids),
            ("validation_task_ids", &self.validation_task_ids),
            ("test_task_ids", &self.test_task_ids),
        ] {
            let unique: BTreeSet<&String> = ids.iter().collect();
            if unique.len() != ids.len() {
                return Err(bad(format!("{split} contains duplicates")));
            }
        }
        let s = &self.staged;
        if s.subset_size == 0 || s.subset_size > s.full_size {
            return Err(bad("need 1 <= subset_size <= full_size".into()));
        }
        if s.full_size != self.task_ids.len() {
            return Err(bad(format!(
                "full_size {} does not match {} training tasks",
                s.full_size,
                self.task_ids.len()
            )));
        }
        match s.gate {
            GatePolicy::MinFraction { fraction, .. } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(bad("gate fraction must lie in (0, 1]".into()))
            }
            _ => Ok(()),
        }
    }
}

/// What a per-task evaluator receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRequest {
    pub task_id: String,
    pub domain: String,
    pub payload_ref: String,
    pub payload_dir: PathBuf,
    pub limits: SandboxLimits,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResponse {
    pub score: f64,
    #[serde(default)]
    pub logs: Option<String>,
}

pub trait TaskEvaluator: Send + Sync {
    /// Score in `[0, 1]` for one task. Errors score 0 and are logged.
    fn evaluate(&self, req: &TaskRequest) -> Result<TaskResponse, EvalError>;
}

/// An evaluator-bound domain.
#[derive(Clone)]
pub struct Domain {
    pub spec: DomainSpec,
    pub evaluator: Arc<dyn TaskEvaluator>,
}

impl Domain {
    pub fn new(spec: DomainSpec, evaluator: Arc<dyn TaskEvaluator>) -> Self {
        Self { spec, evaluator }
    }
}

impl std::fmt::Debug for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Domain").field("spec", &self.spec).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub task_id: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_task: BTreeMap<String, f64>,
    pub gated_out: bool,
    /// Mean over every task of the split; unevaluated tasks count as 0.
    pub aggregate: f64,
    pub incidents: Vec<Incident>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub train: ScoreReport,
    pub validation: Option<ScoreReport>,
}

impl DomainReport {
    pub fn scores(&self) -> DomainScores {
        DomainScores {
            train: self.train.aggregate,
            validation: self.validation.as_ref().map(|r| r.aggregate),
            test: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiDomainReport {
    pub domains: Vec<DomainReport>,
    /// Unweighted mean of the per-domain training aggregates.
    pub combined: f64,
    pub gated_out: bool,
}

impl MultiDomainReport {
    pub fn scores(&self) -> BTreeMap<String, DomainScores> {
        self.domains
            .iter()
            .map(|d| (d.domain.clone(), d.scores()))
            .collect()
    }

    /// Mean over domains of the validation aggregate, or training when absent.
    pub fn selection_score(&self) -> f64 {
        mean(self.domains.iter().map(|d| d.scores().selection()))
    }

    pub fn incidents(&self) -> impl Iterator<Item = (&str, &Incident)> {
        self.domains.iter().flat_map(|d| {
            d.train
                .incidents
                .iter()
                .chain(d.validation.iter().flat_map(|v| v.incidents.iter()))
                .map(move |i| (d.domain.as_str(), i))
        })
    }
}

/// Where and how one agent is evaluated.
#[derive(Debug, Clone)]
pub struct EvalContext {
    /// Iteration and slot of the evaluated agent; together with the master
    /// seed they key every task's random stream.
    pub iteration: u64,
    pub slot: u64,
    pub payload_ref: String,
    pub payload_dir: PathBuf,
    pub limits: SandboxLimits,
    pub master_seed: u64,
    pub exec: Exec,
    /// Maximum number of concurrent task evaluations.
    pub concurrency: usize,
}

impl EvalContext {
    fn task_seed(&self, domain: &str, task_id: &str) -> u64 {
        let seed = StreamId::new(format!("eval/{domain}/{task_id}"), self.iteration, self.slot).seed(self.master_seed);
        u64::from_le_bytes(seed[..8].try_into().expect("8 bytes"))
    }

    fn request(&self, domain: &str, task_id: &str) -> TaskRequest {
        TaskRequest {
            task_id: task_id.to_string(),
            domain: domain.to_string(),
            payload_ref: self.payload_ref.clone(),
            payload_dir: self.payload_dir.clone(),
            limits: self.limits.clone(),
            seed: self.task_seed(domain, task_id),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn run_tasks(
    ctx: &EvalContext,
    domain: &Domain,
    task_ids: &[String],
) -> Vec<(String, f64, Option<Incident>)> {
    ctx.exec.map_bounded(task_ids, ctx.concurrency.max(1), |task_id| {
        let req = ctx.request(&domain.spec.name, task_id);
        match domain.evaluator.evaluate(&req) {
            Ok(resp) if (0.0..=1.0).contains(&resp.score) => (task_id.clone(), resp.score, None),
            Ok(resp) => (
                task_id.clone(),
                0.0,
                Some(Incident {
                    task_id: task_id.clone(),
                    cause: format!("score {} outside [0, 1]", resp.score),
                }),
            ),
            Err(e) => (
                task_id.clone(),
                0.0,
                Some(Incident {
                    task_id: task_id.clone(),
                    cause: e.to_string(),
                }),
            ),
        }
    })
}

struct Partial {
    per_task: BTreeMap<String, f64>,
    incidents: Vec<Incident>,
}

impl Partial {
    fn absorb(&mut self, results: Vec<(String, f64, Option<Incident>)>) {
        for (id, score, incident) in results {
            self.per_task.insert(id, score);
            self.incidents.extend(incident);
        }
    }

    fn finish(mut self, all: &[String], gated_out: bool) -> ScoreReport {
        for id in all {
            self.per_task.entry(id.clone()).or_insert(0.0);
        }
        let aggregate = mean(all.iter().map(|id| self.per_task[id]));
        ScoreReport {
            per_task: self.per_task,
            gated_out,
            aggregate,
            incidents: self.incidents,
        }
    }
}

fn subset(ctx: &EvalContext, domain: &Domain) -> (Partial, bool) {
    let spec = &domain.spec;
    let ids = &spec.task_ids[..spec.staged.subset_size];
    let results = run_tasks(ctx, domain, ids);
    let successes = results.iter().filter(|(_, s, _)| *s > 0.0).count();
    let passed = spec.staged.gate.passes(successes, ids.len());
    let mut partial = Partial {
        per_task: BTreeMap::new(),
        incidents: Vec::new(),
    };
    partial.absorb(results);
    (partial, passed)
}

fn complete(ctx: &EvalContext, domain: &Domain, mut partial: Partial, gated_out: bool) -> DomainReport {
    let spec = &domain.spec;
    if !gated_out {
        partial.absorb(run_tasks(ctx, domain, &spec.task_ids[spec.staged.subset_size..]));
    }
    let validation = spec.has_validation().then(|| {
        let mut v = Partial {
            per_task: BTreeMap::new(),
            incidents: Vec::new(),
        };
        if !gated_out {
            v.absorb(run_tasks(ctx, domain, &spec.validation_task_ids));
        }
        v.finish(&spec.validation_task_ids, gated_out)
    });
    DomainReport {
        domain: spec.name.clone(),
        train: partial.finish(&spec.task_ids, gated_out),
        validation,
    }
}

/// Staged evaluation on one domain.
pub fn staged_evaluate(ctx: &EvalContext, domain: &Domain) -> DomainReport {
    let (partial, passed) = subset(ctx, domain);
    complete(ctx, domain, partial, !passed)
}

/// Staged evaluation on several domains with a shared gate.
pub fn multi_domain_evaluate(ctx: &EvalContext, domains: &[Domain]) -> MultiDomainReport {
    let subsets: Vec<(Partial, bool)> = domains.iter().map(|d| subset(ctx, d)).collect();
    let gated_out = subsets.iter().any(|(_, passed)| !passed);
    let reports: Vec<DomainReport> = domains
        .iter()
        .zip(subsets)
        .map(|(d, (partial, _))| complete(ctx, d, partial, gated_out))
        .collect();
    let combined = mean(reports.iter().map(|r| r.train.aggregate));
    MultiDomainReport {
        domains: reports,
        combined,
        gated_out,
    }
}

/// Held-out test aggregate per domain that lists test tasks.
pub fn test_evaluate(ctx: &EvalContext, domains: &[Domain]) -> BTreeMap<String, ScoreReport> {
    domains
        .iter()
        .filter(|d| !d.spec.test_task_ids.is_empty())
        .map(|d| {
            let mut p = Partial {
                per_task: BTreeMap::new(),
                incidents: Vec::new(),
            };
            p.absorb(run_tasks(ctx, d, &d.spec.test_task_ids));
            (d.spec.name.clone(), p.finish(&d.spec.test_task_ids, false))
        })
        .collect()
}

/// Selection score of an evaluated node: per domain the validation aggregate
/// when the domain has validation tasks, else the training aggregate; then
/// the unweighted mean over domains.
pub fn selection_score(node: &AgentNode, domains: &[DomainSpec]) -> Result<f64, EvalError> {
    let mut values = Vec::with_capacity(domains.len());
    for d in domains {
        let missing = || EvalError::NoRecord {
            node: node.id,
            domain: d.name.clone(),
        };
        let scores = node.scores.get(&d.name).ok_or_else(missing)?;
        values.push(if d.has_validation() {
            scores.validation.ok_or_else(missing)?
        } else {
            scores.train
        });
    }
    if values.is_empty() {
        return Err(EvalError::NoRecord {
            node: node.id,
            domain: String::new(),
        });
    }
    Ok(mean(values.into_iter()))
}

/// Runs a configured command per task inside the sandbox. The command gets
/// the [`TaskRequest`] as JSON on standard input, runs in the payload
/// directory, and must print a [`TaskResponse`] as JSON.
#[derive(Debug, Clone)]
pub struct CommandEvaluator {
    pub command: Vec<String>,
}

impl TaskEvaluator for CommandEvaluator {
    fn evaluate(&self, req: &TaskRequest) -> Result<TaskResponse, EvalError> {
        let fail = |cause: String| EvalError::Task {
            task_id: req.task_id.clone(),
            cause,
        };
        let input = serde_json::to_vec(req).expect("request serializes");
        let cmd = SandboxCommand::new(self.command.iter().cloned())
            .cwd(&req.payload_dir)
            .stdin(input)
            .env("STEPSTONE_PAYLOAD_DIR", req.payload_dir.to_string_lossy())
            .env("STEPSTONE_TASK_ID", req.task_id.clone());
        let out = sandbox_execute(&cmd, &req.limits).map_err(|e| fail(e.to_string()))?;
        if let Some(cause) = out.failure_cause() {
            return Err(fail(cause));
        }
        if out.stdout_truncated {
            return Err(fail("output limit".into()));
        }
        serde_json::from_slice(&out.stdout).map_err(|e| fail(format!("malformed response: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticOutcome {
    /// Score is the landscape fitness, plus optional Gaussian noise.
    #[default]
    Continuous,
    /// Score is 1 with probability equal to the fitness, else 0.
    Bernoulli,
}

/// In-process evaluator scoring a simulated genome on a landscape.
#[derive(Debug, Clone)]
pub struct SyntheticEvaluator {
    pub landscape: Landscape,
    pub outcome: SyntheticOutcome,
    pub noise: f64,
}

impl SyntheticEvaluator {
    pub fn new(landscape: Landscape) -> Self {
        Self {
            landscape,
            outcome: SyntheticOutcome::Continuous,
            noise: 0.0,
        }
    }
}

impl TaskEvaluator for SyntheticEvaluator {
    fn evaluate(&self, req: &TaskRequest) -> Result<TaskResponse, EvalError> {
        let fail = |cause: String| EvalError::Task {
            task_id: req.task_id.clone(),
            cause,
        };
        let genome = SimulatedAgentGenome::read(&req.payload_dir).map_err(|e| fail(e.to_string()))?;
        if genome.broken {
            return Err(fail("agent failed to load".into()));
        }
        let fitness = self.landscape.fitness(&genome.task_skill);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(req.seed);
        let score = match self.outcome {
            SyntheticOutcome::Continuous if self.noise > 0.0 => {
                let z: f64 = StandardNormal.sample(&mut rng);
                (fitness + self.noise * z).clamp(0.0, 1.0)
            }
            SyntheticOutcome::Continuous => fitness,
            SyntheticOutcome::Bernoulli => {
                if rng.random::<f64>() < fitness {
                    1.0
                } else {
                    0.0
                }
            }
        };
        Ok(TaskResponse { score, logs: None })
    }
}

/// Fixed per-task scores; tasks missing from the table fail.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEvaluator {
    pub scores: BTreeMap<String, f64>,
}

impl ScriptedEvaluator {
    pub fn new<I, S>(scores: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            scores: scores.into_iter().map(|(k, v)| (k.into(), v)).collect(),
        }
    }

    /// Tasks `prefix0..prefix{n-1}` where the first `ones` score 1.
    pub fn ones_then_zeros(prefix: &str, n: usize, ones: usize) -> Self {
        Self::new((0..n).map(|i| (format!("{prefix}{i}"), if i < ones { 1.0 } else { 0.0 })))
    }
}

impl TaskEvaluator for ScriptedEvaluator {
    fn evaluate(&self, req: &TaskRequest) -> Result<TaskResponse, EvalError> {
        self.scores
            .get(&req.task_id)
            .map(|&score| TaskResponse { score, logs: None })
            .ok_or_else(|| EvalError::Task {
                task_id: req.task_id.clone(),
                cause: "no scripted score".into(),
            })
    }
}

/// Task ids `{prefix}0 .. {prefix}{n-1}`.
pub fn numbered_tasks(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}
