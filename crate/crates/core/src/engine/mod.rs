//! The iteration loop.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml     effective configuration
//! state.json      checkpoint: completed iterations, log length, config hash
//! events.jsonl    append-only event log
//! archive/        manifest.json + nodes/NNNNNNNN.json
//! payloads/       agent payload directories (unless paths.payload_dir is set)
//! logs/           validity logs
//! ```
//!
//! Iteration `i` (1-based) selects parents, generates and evaluates one
//! child per parent concurrently, then archives the compiled children in
//! slot order. All randomness comes from substreams keyed by
//! `(seed, label, i, slot)`, so a run resumed from any checkpoint follows
//! the same trajectory as an uninterrupted one.

pub mod events;

use crate::archive::store::{self, write_atomic, ArchiveStore};
use crate::archive::{AddOutcome, AgentNode, Archive, ArchiveError, NodeId};
use crate::config::{ConfigError, RunConfig};
use crate::evaluation::{multi_domain_evaluate, test_evaluate, Domain, EvalContext, MultiDomainReport};
use crate::generation::template::{render, DEFAULT_INSTRUCTION_TEMPLATE};
use crate::generation::{
    generate_child, validate_child, EvaluationSummary, GenerationBackend, GenerationError,
    GenerationRequest, GenerationResult, Workspace,
};
use crate::mode::Mode;
use crate::par::Exec;
use crate::rng::StreamId;
use crate::selection::{sample_parents, selection_distribution, view, SelectionPolicy};
use events::{read_log, read_log_prefix, Event, EventLog, EventRecord, LogError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

pub const CONFIG_FILE: &str = "config.toml";
pub const STATE_FILE: &str = "state.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const ARCHIVE_DIR: &str = "archive";
pub const PAYLOAD_DIR: &str = "payloads";
pub const LOG_DIR: &str = "logs";
pub const ROOT_PAYLOAD: &str = "root";
const STATE_FORMAT: &str = "stepstone-state/1";

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("state directory {0} already holds a run")]
    AlreadyExists(PathBuf),
    #[error("initial agent is not valid: {0}")]
    RootInvalid(String),
    #[error("config hash {found} does not match the run's {expected}; refusing to resume")]
    ConfigMismatch { expected: String, found: String },
    #[error("integrity check failed at event {seq}: {reason}")]
    Integrity { seq: u64, reason: String },
    #[error("corrupt state file: {0}")]
    CorruptState(String),
    #[error("run is already complete")]
    Complete,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EngineError + '_ {
    move |source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Checkpoint written after the root evaluation and after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunState {
    pub format: String,
    pub run_id: String,
    pub config_hash: String,
    pub master_seed: u64,
    /// Completed iterations; the next random substreams are keyed by `iteration + 1`.
    pub iteration: u64,
    pub total_iterations: u64,
    pub complete: bool,
    pub next_seq: u64,
    pub log_bytes: u64,
}

/// Pluggable parts of a run.
#[derive(Clone)]
pub struct Components {
    pub backend: Arc<dyn GenerationBackend>,
    pub domains: Vec<Domain>,
    pub instruction_template: String,
    pub exec: Exec,
}

impl Components {
    pub fn from_config(config: &RunConfig) -> Result<Self, EngineError> {
        let instruction_template = match &config.paths.instruction_template {
            Some(path) => fs::read_to_string(path).map_err(io_err(path))?,
            None => DEFAULT_INSTRUCTION_TEMPLATE.to_string(),
        };
        Ok(Self {
            backend: config.build_backend(),
            domains: config.build_domains(),
            instruction_template,
            exec: Exec::default(),
        })
    }
}

/// What [`Engine::resume`] found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeNotice {
    /// The run continues after this many completed iterations.
    Continuing { completed: u64 },
    /// Nothing left to do.
    AlreadyComplete,
}

struct ChildJob {
    slot: u64,
    parent: AgentNode,
    modifier: AgentNode,
}

struct ChildOutcome {
    slot: u64,
    parent: NodeId,
    modifier: NodeId,
    request: GenerationRequest,
    instruction: Option<Result<String, String>>,
    result: GenerationResult,
    report: Option<MultiDomainReport>,
}

pub struct Engine {
    config: RunConfig,
    dir: PathBuf,
    components: Components,
    archive: Archive,
    store: ArchiveStore,
    log: EventLog,
    state: RunState,
    ws: Workspace,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("dir", &self.dir)
            .field("state", &self.state)
            .finish_non_exhaustive()
    }
}

fn workspace(config: &RunConfig, dir: &Path) -> Workspace {
    Workspace {
        payload_root: config
            .paths
            .payload_dir
            .clone()
            .unwrap_or_else(|| dir.join(PAYLOAD_DIR)),
        log_root: dir.join(LOG_DIR),
    }
}

fn read_state(dir: &Path) -> Result<RunState, EngineError> {
    let path = dir.join(STATE_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let state: RunState =
        serde_json::from_slice(&bytes).map_err(|e| EngineError::CorruptState(e.to_string()))?;
    if state.format != STATE_FORMAT {
        return Err(EngineError::CorruptState(format!("unknown format `{}`", state.format)));
    }
    Ok(state)
}

impl Engine {
    /// Starts a new run in `dir` with components built from `config`.
    pub fn create(config: RunConfig, dir: &Path) -> Result<Self, EngineError> {
        let components = Components::from_config(&config)?;
        Self::create_with(config, dir, components)
    }

    /// Starts a new run with injected components. Evaluates the initial agent.
    pub fn create_with(config: RunConfig, dir: &Path, components: Components) -> Result<Self, EngineError> {
        config.validate()?;
        if dir.join(STATE_FILE).exists() || dir.join(EVENTS_FILE).exists() {
            return Err(EngineError::AlreadyExists(dir.to_path_buf()));
        }
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_atomic(&dir.join(CONFIG_FILE), config.to_toml_string().as_bytes())
            .map_err(io_err(&dir.join(CONFIG_FILE)))?;

        let config_hash = config.hash();
        let run_id = format!("run-{}", &config_hash[..16]);
        let ws = workspace(&config, dir);
        let root_dir = ws.payload(ROOT_PAYLOAD);
        if root_dir.exists() {
            fs::remove_dir_all(&root_dir).map_err(io_err(&root_dir))?;
        }
        components.backend.write_initial(&root_dir)?;
        let verdict = validate_child(components.backend.as_ref(), &root_dir, &config.limits);
        if !verdict.ok {
            return Err(EngineError::RootInvalid(verdict.cause.unwrap_or_default()));
        }

        let ctx = EvalContext {
            iteration: 0,
            slot: 0,
            payload_ref: ROOT_PAYLOAD.into(),
            payload_dir: root_dir,
            limits: config.limits.clone(),
            master_seed: config.seed,
            exec: components.exec,
            concurrency: config.concurrency,
        };
        let report = multi_domain_evaluate(&ctx, &components.domains);
        let mut root = AgentNode::new(0, None, ROOT_PAYLOAD).at_iteration(0);
        root.scores = report.scores();
        let mut archive = Archive::with_root(config.mode, run_id.clone(), root.clone())?;

        let mut store = ArchiveStore::create(dir.join(ARCHIVE_DIR))?;
        let mut log = EventLog::open(&dir.join(EVENTS_FILE), 0, 0)?;
        log.append(Event::RunStarted {
            run_id: run_id.clone(),
            mode: config.mode,
            config_hash: config_hash.clone(),
            iterations: config.iterations,
            seed: config.seed,
        })?;
        log.append(Event::RootEvaluated {
            node: root,
            selection_score: report.selection_score(),
            gated_out: report.gated_out,
        })?;
        store.flush(&mut archive)?;
        let state = RunState {
            format: STATE_FORMAT.into(),
            run_id,
            config_hash,
            master_seed: config.seed,
            iteration: 0,
            total_iterations: config.iterations,
            complete: false,
            next_seq: log.next_seq(),
            log_bytes: log.len(),
        };
        let mut engine = Self {
            config,
            dir: dir.to_path_buf(),
            components,
            archive,
            store,
            log,
            state,
            ws,
        };
        engine.checkpoint()?;
        Ok(engine)
    }

    /// Reopens a run with components built from its stored config.
    pub fn resume(dir: &Path) -> Result<(Self, ResumeNotice), EngineError> {
        let config = Self::stored_config(dir)?;
        let components = Components::from_config(&config)?;
        Self::resume_with(dir, components)
    }

    pub fn stored_config(dir: &Path) -> Result<RunConfig, EngineError> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(RunConfig::from_toml_str(&text)?)
    }

    /// Reopens a run after checking the stored archive against a replay of
    /// the event log. Events after the last checkpoint are discarded.
    pub fn resume_with(dir: &Path, components: Components) -> Result<(Self, ResumeNotice), EngineError> {
        let config = Self::stored_config(dir)?;
        let state = read_state(dir)?;
        let found = config.hash();
        if found != state.config_hash {
            return Err(EngineError::ConfigMismatch {
                expected: state.config_hash,
                found,
            });
        }
        let log_path = dir.join(EVENTS_FILE);
        let records = read_log_prefix(&log_path, state.log_bytes)?;
        if records.len() as u64 != state.next_seq {
            return Err(EngineError::Integrity {
                seq: records.len() as u64,
                reason: format!(
                    "checkpoint expects {} events, log holds {}",
                    state.next_seq,
                    records.len()
                ),
            });
        }
        let archive = store::load(&dir.join(ARCHIVE_DIR))?;
        check_replay(&records, &archive, &state)?;

        let log = EventLog::open(&log_path, state.next_seq, state.log_bytes)?;
        let store = ArchiveStore::attach(dir.join(ARCHIVE_DIR), &archive);
        let notice = if state.complete {
            log::info!("run in {} is already complete; nothing to resume", dir.display());
            ResumeNotice::AlreadyComplete
        } else {
            ResumeNotice::Continuing {
                completed: state.iteration,
            }
        };
        let ws = workspace(&config, dir);
        Ok((
            Self {
                config,
                dir: dir.to_path_buf(),
                components,
                archive,
                store,
                log,
                state,
                ws,
            },
            notice,
        ))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn is_complete(&self) -> bool {
        self.state.complete
    }

    pub fn events(&self) -> Result<Vec<EventRecord>, EngineError> {
        Ok(read_log(&self.dir.join(EVENTS_FILE))?)
    }

    pub fn manifest_hash(&self) -> Result<String, EngineError> {
        Ok(store::manifest_hash(&self.dir.join(ARCHIVE_DIR))?)
    }

    fn checkpoint(&mut self) -> Result<(), EngineError> {
        self.store.flush(&mut self.archive)?;
        self.log.sync()?;
        self.state.next_seq = self.log.next_seq();
        self.state.log_bytes = self.log.len();
        let mut bytes = serde_json::to_vec_pretty(&self.state).expect("state serializes");
        bytes.push(b'\n');
        let path = self.dir.join(STATE_FILE);
        write_atomic(&path, &bytes).map_err(io_err(&path))
    }

    fn select(&self, iteration: u64) -> Result<Event, EngineError> {
        let count = self.config.parents_per_iteration;
        let stream = StreamId::new("select", iteration, 0);
        if !self.archive.mode().keeps_archive() {
            let sole = self.archive.latest().expect("archive is never empty").id;
            return Ok(Event::Selection {
                iteration,
                selector: None,
                policy: None,
                fallback: None,
                stream,
                parents: vec![sole; count],
            });
        }
        let (selector, mut policy, mut fallback) = if self.config.mode == Mode::ModifiableSelection {
            let latest = self.archive.latest().expect("archive is never empty");
            let routine = self
                .components
                .backend
                .selection_routine(&self.ws.payload(&latest.payload_ref));
            match routine {
                Ok(p) => (Some(latest.id), p, None),
                Err(e) => (Some(latest.id), SelectionPolicy::UniformRandom, Some(e.to_string())),
            }
        } else {
            (None, self.config.selection, None)
        };
        let candidates = view(&self.archive);
        let breakdown = match selection_distribution(&candidates, &policy) {
            Ok(b) => b,
            Err(e) if selector.is_some() => {
                fallback = Some(e.to_string());
                policy = SelectionPolicy::UniformRandom;
                selection_distribution(&candidates, &policy).expect("uniform over a non-empty view")
            }
            Err(e) => unreachable!("validated configuration produced {e}"),
        };
        let mut rng = stream.rng(self.config.seed);
        let parents = sample_parents(&breakdown, count, &mut rng);
        Ok(Event::Selection {
            iteration,
            selector,
            policy: Some(policy),
            fallback,
            stream,
            parents,
        })
    }

    fn produce(&self, iteration: u64, job: &ChildJob, summaries: &[EvaluationSummary]) -> ChildOutcome {
        let child_ref = format!("i{iteration:05}-s{:03}", job.slot);
        let mut request = GenerationRequest {
            parent_id: job.parent.id,
            parent_payload_ref: job.parent.payload_ref.clone(),
            modifier_id: job.modifier.id,
            modifier_payload_ref: job.modifier.payload_ref.clone(),
            child_payload_ref: child_ref.clone(),
            eval_results_ref: EVENTS_FILE.into(),
            evaluation_summaries: summaries.to_vec(),
            iterations_left: self.config.iterations - (iteration - 1),
            total_iterations: self.config.iterations,
            stream: StreamId::new("gen", iteration, job.slot),
            master_seed: self.config.seed,
            self_improve: self.config.mode.self_improves(),
            instruction: None,
        };
        let backend = self.components.backend.as_ref();
        let mut instruction = None;
        if self.config.mode == Mode::DgmFixedInstruction {
            let summary_text = summaries
                .iter()
                .map(|s| format!("node {}: {:.4}", s.node_id, s.selection_score))
                .collect::<Vec<_>>()
                .join("\n");
            let vars = BTreeMap::from([
                ("code", self.ws.payload(&job.parent.payload_ref).display().to_string()),
                ("eval_summary", summary_text),
                ("iterations_left", request.iterations_left.to_string()),
            ]);
            let rendered = render(&self.components.instruction_template, &vars);
            let produced = backend.instruction(&request, &rendered).map_err(|e| e.to_string());
            if let Ok(text) = &produced {
                request.instruction = Some(text.clone());
            }
            instruction = Some(produced);
        }
        let result = match &instruction {
            Some(Err(e)) => GenerationResult {
                child_payload_ref: child_ref,
                compiled: false,
                validity_log: String::new(),
                wall_time: 0.0,
                cause: Some(format!("instruction generation failed: {e}")),
            },
            _ => generate_child(backend, &request, &self.ws, &self.config.limits),
        };
        let report = result.compiled.then(|| {
            let ctx = EvalContext {
                iteration,
                slot: job.slot,
                payload_ref: result.child_payload_ref.clone(),
                payload_dir: self.ws.payload(&result.child_payload_ref),
                limits: self.config.limits.clone(),
                master_seed: self.config.seed,
                exec: self.components.exec,
                concurrency: self.config.concurrency,
            };
            multi_domain_evaluate(&ctx, &self.components.domains)
        });
        ChildOutcome {
            slot: job.slot,
            parent: job.parent.id,
            modifier: job.modifier.id,
            request,
            instruction,
            result,
            report,
        }
    }

    /// Runs one iteration and checkpoints.
    pub fn step(&mut self) -> Result<(), EngineError> {
        if self.state.iteration >= self.config.iterations {
            return Err(EngineError::Complete);
        }
        let iteration = self.state.iteration + 1;
        let selection = self.select(iteration)?;
        let parents = match &selection {
            Event::Selection { parents, .. } => parents.clone(),
            _ => unreachable!(),
        };
        self.log.append(selection)?;

        let root_modifier = if self.config.mode.self_improves() {
            None
        } else {
            Some(self.archive.get(0)?.clone())
        };
        let jobs: Vec<ChildJob> = parents
            .iter()
            .enumerate()
            .map(|(slot, &p)| {
                let parent = self.archive.get(p).expect("sampled from the archive").clone();
                let modifier = root_modifier.clone().unwrap_or_else(|| parent.clone());
                ChildJob {
                    slot: slot as u64,
                    parent,
                    modifier,
                }
            })
            .collect();
        let summaries: Vec<EvaluationSummary> = self
            .archive
            .nodes()
            .iter()
            .map(|n| EvaluationSummary {
                node_id: n.id,
                selection_score: n.selection_score(),
            })
            .collect();
        let started = Instant::now();
        let outcomes = {
            let this = &*self;
            this.components
                .exec
                .map_bounded(&jobs, this.config.concurrency, |job| this.produce(iteration, job, &summaries))
        };
        log::debug!(
            "iteration {iteration}: {} children in {:.3}s",
            outcomes.len(),
            started.elapsed().as_secs_f64()
        );

        for out in outcomes {
            self.record_child(iteration, out)?;
        }
        let best = self
            .archive
            .best_by_selection()
            .map_or(0.0, AgentNode::selection_score);
        self.log.append(Event::IterationComplete {
            iteration,
            archive_size: self.archive.len(),
            best_selection_score: best,
        })?;
        self.state.iteration = iteration;
        self.checkpoint()
    }

    fn record_child(&mut self, iteration: u64, out: ChildOutcome) -> Result<(), EngineError> {
        let slot = out.slot;
        if let Some(instruction) = &out.instruction {
            self.log.append(Event::InstructionGenerated {
                iteration,
                slot,
                parent: out.parent,
                instruction: instruction.as_ref().ok().cloned(),
                error: instruction.as_ref().err().cloned(),
            })?;
        }
        self.log.append(Event::Generation {
            iteration,
            slot,
            parent: out.parent,
            modifier: out.modifier,
            child_payload_ref: out.result.child_payload_ref.clone(),
            iterations_left: out.request.iterations_left,
            stream: out.request.stream.clone(),
            wall_time: out.result.wall_time,
        })?;
        self.log.append(Event::Validation {
            iteration,
            slot,
            child_payload_ref: out.result.child_payload_ref.clone(),
            compiled: out.result.compiled,
            cause: out.result.cause.clone(),
            validity_log: out.result.validity_log.clone(),
        })?;
        let Some(report) = out.report else {
            return Ok(());
        };
        self.log.append(Event::Evaluation {
            iteration,
            slot,
            child_payload_ref: out.result.child_payload_ref.clone(),
            scores: report.scores(),
            selection_score: report.selection_score(),
            gated_out: report.gated_out,
            incidents: report
                .incidents()
                .map(|(d, i)| format!("{d}/{}: {}", i.task_id, i.cause))
                .collect(),
        })?;
        let mut node = AgentNode::new(self.archive.next_id(), Some(out.parent), out.result.child_payload_ref)
            .at_iteration(iteration)
            .compiled(true);
        node.scores = report.scores();
        let outcome = self.archive.add_node(node.clone())?;
        let replaced = match outcome {
            AddOutcome::Replaced { previous } => Some(previous),
            AddOutcome::Added => None,
            AddOutcome::Rejected => unreachable!("compiled children are never rejected"),
        };
        self.log.append(Event::ArchiveAdd {
            iteration,
            slot,
            node,
            replaced,
        })?;
        Ok(())
    }

    /// Runs up to `n` more iterations.
    pub fn run_for(&mut self, n: u64) -> Result<(), EngineError> {
        for _ in 0..n {
            if self.state.iteration >= self.config.iterations {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Runs the remaining iterations, then evaluates the root and the best
    /// agent on the held-out test tasks.
    pub fn run(&mut self) -> Result<(), EngineError> {
        if self.state.complete {
            return Ok(());
        }
        self.run_for(self.config.iterations - self.state.iteration)?;
        self.finish()
    }

    fn finish(&mut self) -> Result<(), EngineError> {
        let best = self.archive.best_by_selection().expect("archive is never empty").id;
        let mut targets = vec![best];
        if best != 0 && self.archive.contains(0) {
            targets.insert(0, 0);
        }
        if self.components.domains.iter().any(|d| !d.spec.test_task_ids.is_empty()) {
            for id in targets {
                let node = self.archive.get(id)?.clone();
                let ctx = EvalContext {
                    iteration: self.config.iterations + 1,
                    slot: id,
                    payload_ref: node.payload_ref.clone(),
                    payload_dir: self.ws.payload(&node.payload_ref),
                    limits: self.config.limits.clone(),
                    master_seed: self.config.seed,
                    exec: self.components.exec,
                    concurrency: self.config.concurrency,
                };
                let reports = test_evaluate(&ctx, &self.components.domains);
                let scores: BTreeMap<String, f64> =
                    reports.iter().map(|(d, r)| (d.clone(), r.aggregate)).collect();
                for (domain, score) in &scores {
                    self.archive.set_test_score(id, domain, *score)?;
                }
                self.log.append(Event::TestEvaluated { node: id, scores })?;
            }
        }
        self.log.append(Event::RunComplete {
            archive_size: self.archive.len(),
            best_node: best,
        })?;
        self.state.complete = true;
        self.checkpoint()
    }
}

/// Rebuilds the archive from the log and compares it with `archive`.
fn check_replay(records: &[EventRecord], archive: &Archive, state: &RunState) -> Result<(), EngineError> {
    let fail = |seq: u64, reason: String| EngineError::Integrity { seq, reason };
    let mut replay: Option<Archive> = None;
    let mut introduced: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut iterations = 0u64;
    let mut last_seq = 0u64;
    for r in records {
        last_seq = r.seq;
        match &r.event {
            Event::RunStarted {
                run_id, config_hash, ..
            } => {
                if run_id != &state.run_id || config_hash != &state.config_hash {
                    return Err(fail(r.seq, "run identity differs from the checkpoint".into()));
                }
            }
            Event::RootEvaluated { node, .. } => {
                let a = Archive::with_root(archive.mode(), state.run_id.clone(), node.clone())
                    .map_err(|e| fail(r.seq, e.to_string()))?;
                introduced.insert(node.id, r.seq);
                replay = Some(a);
            }
            Event::ArchiveAdd { node, .. } => {
                let a = replay
                    .as_mut()
                    .ok_or_else(|| fail(r.seq, "archive add before the root".into()))?;
                a.add_node(node.clone()).map_err(|e| fail(r.seq, e.to_string()))?;
                introduced.insert(node.id, r.seq);
                if let Some(parent) = node.parent_id {
                    introduced.entry(parent).and_modify(|s| *s = r.seq);
                }
            }
            Event::TestEvaluated { node, scores } => {
                let a = replay
                    .as_mut()
                    .ok_or_else(|| fail(r.seq, "test evaluation before the root".into()))?;
                for (domain, score) in scores {
                    a.set_test_score(*node, domain, *score)
                        .map_err(|e| fail(r.seq, e.to_string()))?;
                }
                introduced.insert(*node, r.seq);
            }
            Event::IterationComplete { iteration, .. } => {
                iterations += 1;
                if *iteration != iterations {
                    return Err(fail(r.seq, format!("iteration {iteration} out of order")));
                }
            }
            _ => {}
        }
    }
    if iterations != state.iteration {
        return Err(fail(
            last_seq,
            format!(
                "log records {iterations} completed iterations, checkpoint says {}",
                state.iteration
            ),
        ));
    }
    let replay = replay.ok_or_else(|| fail(0, "log has no root evaluation".into()))?;
    if replay.nodes() == archive.nodes() && replay.next_id() == archive.next_id() {
        return Ok(());
    }
    let first_bad = replay
        .nodes()
        .iter()
        .zip(archive.nodes())
        .find(|(a, b)| a != b)
        .map(|(a, _)| a.id)
        .or_else(|| {
            let n = replay.len().min(archive.len());
            replay.nodes().get(n).map(|x| x.id)
        });
    let seq = first_bad
        .and_then(|id| introduced.get(&id).copied())
        .unwrap_or(last_seq);
    Err(fail(
        seq,
        format!(
            "stored archive differs from the log replay (first differing node: {})",
            first_bad.map_or("none".into(), |id| id.to_string())
        ),
    ))
}

/// Creates a run in `dir` and takes it to completion.
pub fn run(config: RunConfig, dir: &Path) -> Result<Engine, EngineError> {
    let mut engine = Engine::create(config, dir)?;
    engine.run()?;
    Ok(engine)
}
